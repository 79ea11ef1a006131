"""Bidirectional GRU encoder, additive attention, GRU decoder and the
deep output layer producing shortlist logits.

Everything here is a pure function of (inputs, parameter leaf nodes) and is
batch-major: token ids (B, T), states (B, H), annotations (B, T, 2H). `ns`
is a dict of parameter Nodes for one recorded graph (ParamStore.nodes()).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc


@dataclass
class EncoderOutput:
    """Per-position annotations [forward-state || backward-state]."""

    annotations: nc.Node  # (B, T, 2H)
    backward_final: nc.Node  # (B, H): right-to-left state after the full pass
    length: int


@dataclass
class AttentionResult:
    weights: nc.Node  # (B, T), rows sum to 1
    context: nc.Node  # (B, 2H) = sum_j weights_j * annotation_j


def gru_cell(prev_hidden, x, ns, prefix):
    """One GRU update; update gate at 1 carries prev_hidden through."""
    if x.data.shape[0] != prev_hidden.data.shape[0]:
        raise ValueError("gru_cell: batch mismatch")
    xh = nc.concat([x, prev_hidden])
    z = nc.sigmoid(nc.affine(ns[prefix + ".Wz"], xh, ns[prefix + ".bz"]))
    r = nc.sigmoid(nc.affine(ns[prefix + ".Wr"], xh, ns[prefix + ".br"]))
    xrh = nc.concat([x, nc.mul(r, prev_hidden)])
    cand = nc.tanh(nc.affine(ns[prefix + ".Wc"], xrh, ns[prefix + ".bc"]))
    return nc.add(nc.mul(z, prev_hidden), nc.mul(nc.one_minus(z), cand))


def gru_param_shapes(input_dim, hidden):
    return {
        "Wz": (hidden, input_dim + hidden), "bz": (hidden,),
        "Wr": (hidden, input_dim + hidden), "br": (hidden,),
        "Wc": (hidden, input_dim + hidden), "bc": (hidden,),
    }


def encode(source_ids, ns, hidden):
    """Run both directions over the source and stack annotation rows.

    source_ids: integer array (B, T), T >= 1; ids must be valid rows of
    ns["emb"].
    """
    source_ids = np.asarray(source_ids)
    if source_ids.ndim != 2 or source_ids.shape[1] == 0:
        raise ValueError("encode: source must be a non-empty (B, T) id array")
    b, t = source_ids.shape
    dtype = ns["emb"].data.dtype
    xs = [nc.embed(ns["emb"], source_ids[:, j]) for j in range(t)]
    h = nc.as_node(np.zeros((b, hidden), dtype=dtype))
    fwd = []
    for j in range(t):
        h = gru_cell(h, xs[j], ns, "enc_fwd")
        fwd.append(h)
    h = nc.as_node(np.zeros((b, hidden), dtype=dtype))
    bwd = [None] * t
    for j in reversed(range(t)):
        h = gru_cell(h, xs[j], ns, "enc_bwd")
        bwd[j] = h
    rows = [nc.concat([fwd[j], bwd[j]]) for j in range(t)]
    return EncoderOutput(nc.stack_time(rows), bwd[0], t)


def init_decoder_state(enc, ns):
    """s_0 = tanh(affine(final backward encoder state))."""
    return nc.tanh(nc.affine(ns["init.W"], enc.backward_final, ns["init.b"]))


def annotation_projection(enc, ns):
    """Position-wise part of the attention scorer; compute once per source."""
    return nc.affine(ns["att.Wh"], enc.annotations, ns["att.b"])


def attend(s_prev, y_emb, enc, ns, ann_proj=None):
    """Score each source position against (s_prev, y_emb) and mix.

    Scorer: one tanh hidden layer over [s_prev, h_j, y_emb], scalar linear
    readout; weights are the softmax over positions.
    """
    if ann_proj is None:
        ann_proj = annotation_projection(enc, ns)
    q = nc.add(nc.linear(ns["att.Ws"], s_prev), nc.linear(ns["att.We"], y_emb))
    hidden = nc.tanh(nc.add(ann_proj, nc.repeat_time(q, enc.length)))
    scores = nc.matvec(hidden, ns["att.v"])
    weights = nc.softmax(scores)
    return AttentionResult(weights, nc.weighted_sum(weights, enc.annotations))


def prev_token_embedding(y_prev_ids, batch, ns):
    """Embedding fed for y_{t-1}; a learned begin-of-sequence row at t=0."""
    if y_prev_ids is None:
        return _bos_rows(batch, ns)
    return nc.embed(ns["emb"], np.asarray(y_prev_ids))


def _bos_rows(batch, ns):
    bos = ns["bos_emb"]  # (E,)
    out = nc.Node(
        np.broadcast_to(bos.data, (batch, bos.data.shape[0])), (bos,)
    )
    out._bwd = lambda g: nc._acc(bos, g.sum(axis=0))
    return out


def decoder_step(s_prev, y_emb, context, ns):
    """s_t = GRU(s_{t-1}, [embed(y_{t-1}) || c_t])."""
    return gru_cell(s_prev, nc.concat([y_emb, context]), ns, "dec")


def deep_output(s, y_emb, context, ns):
    """Shortlist logits through a single feed-forward layer then affine."""
    u = nc.concat([s, y_emb, context])
    h = nc.tanh(nc.affine(ns["out.W1"], u, ns["out.b1"]))
    return nc.affine(ns["out.W2"], h, ns["out.b2"])
