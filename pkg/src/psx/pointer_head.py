"""Adaptive output layer: shortlist softmax, location softmax over source
positions, a switching network, the fused distribution, joint NLL, and
greedy decoding — plus the two model assemblies that use it (the
encoder-decoder and the sequence-summary variant).

The fused vector is [d * w || (1 - d) * loc]: shortlist block first, so the
flat index of location j is shortlist_size + j. A step's NLL is
-log(fused[flat index]) with probabilities floored at 1e-12, which equals
-log p(word) - log d (switch on) or -log p(location) - log(1 - d)
(switch off) up to float association.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import numcore as nc
from . import seq2seq as s2s
from .numcore import PROB_FLOOR

DEFERRED_PTR = -2  # location label resolved from attention at training time
NO_PTR = -1


@dataclass(frozen=True)
class StepTarget:
    """Observed (z, word-or-location) supervision for one output step.

    z=1 carries a shortlist word id; z=0 carries a source position, or a
    deferred marker resolved against the model's attention during training.
    """

    z: int
    word: int | None = None
    location: int | None = None
    deferred: bool = False

    def __post_init__(self):
        if self.z not in (0, 1):
            raise ValueError(f"z must be 0 or 1, got {self.z}")
        if self.z == 1:
            if self.word is None or self.location is not None or self.deferred:
                raise ValueError("z=1 step must carry exactly a word id")
        else:
            if self.word is not None:
                raise ValueError("z=0 step must not carry a word id")
            if self.location is None and not self.deferred:
                raise ValueError("z=0 step needs a location or deferred flag")
            if self.location is not None and self.deferred:
                raise ValueError("deferred step must not carry a location")

    def validate_against(self, source_len):
        if self.location is not None and not 0 <= self.location < source_len:
            raise ValueError(
                f"location {self.location} out of range for source length {source_len}"
            )


@dataclass
class StepOutput:
    """Numpy view of one decoded step's distributions."""

    w: np.ndarray  # (S,) shortlist probabilities
    loc: np.ndarray  # (T,) location probabilities
    d: float  # switch probability p(z=1)
    fused: np.ndarray  # (S+T,) = [d*w || (1-d)*loc]


def flat_index(target: StepTarget, shortlist_size):
    return target.word if target.z == 1 else shortlist_size + target.location


def switch_mlp(u, ns, inverse_temperature, activation="tanh"):
    """Two hidden layers with a residual from the first pre-activation to
    the second layer's input, then a sigmoid readout sharpened by the
    inverse temperature. Returns shape (..., 1)."""
    if inverse_temperature <= 0:
        raise ValueError("inverse_temperature must be positive")
    act = {"tanh": nc.tanh, "relu": nc.relu}[activation]
    a1 = nc.affine(ns["sw.W1"], u, ns["sw.b1"])
    h2 = act(nc.affine(ns["sw.W2"], nc.add(act(a1), a1), ns["sw.b2"]))
    pre = nc.affine(ns["sw.W3"], h2, ns["sw.b3"])
    return nc.sigmoid(nc.scale(pre, inverse_temperature))


def switch_prob(context, prev_hidden, ns, inverse_temperature, activation="tanh"):
    """p(z=1) from [context || previous decoder state]; p(z=0) = 1 - d."""
    u = nc.concat([context, prev_hidden])
    return switch_mlp(u, ns, inverse_temperature, activation)


def location_softmax(attention: s2s.AttentionResult):
    """The location distribution shares the attention weights verbatim."""
    return attention.weights


def fuse(w, loc, d):
    """[d*w || (1-d)*loc]; d has shape w.shape[:-1] + (1,)."""
    w, loc, d = nc.as_node(w), nc.as_node(loc), nc.as_node(d)
    dd = d.data
    if dd.min() < 0.0 or dd.max() > 1.0:
        raise ValueError("fuse: switch probability outside [0, 1]")
    for name, dist in (("w", w), ("loc", loc)):
        sums = dist.data.sum(axis=-1)
        if np.abs(sums - 1.0).max() > 1e-3:
            raise ValueError(f"fuse: {name} does not sum to 1")
    return nc.concat([nc.mul_last(w, d), nc.mul_last(loc, nc.one_minus(d))])


def step_nll(out: StepOutput, target: StepTarget):
    """-log fused[flat index]; same floating ops as the training path."""
    if target.z == 0:
        if target.deferred:
            raise ValueError("cannot score a deferred step without attention")
        if not 0 <= target.location < len(out.loc):
            raise ValueError(f"location {target.location} >= T_x {len(out.loc)}")
    else:
        if not 0 <= target.word < len(out.w):
            raise ValueError(f"word {target.word} outside shortlist {len(out.w)}")
    idx = flat_index(target, len(out.w))
    return float(-np.log(np.maximum(out.fused[idx], PROB_FLOOR)))


@dataclass
class DecodedToken:
    kind: str  # "word" | "copy"
    token_id: int
    source_pos: int | None


def resolve_fused_argmax(fused_row, source_ids, shortlist_size):
    """Argmax over the fused vector; ties resolve to the lowest flat index
    (shortlist block first), so a tied word beats a tied location."""
    idx = int(np.argmax(fused_row))
    if idx < shortlist_size:
        return DecodedToken("word", idx, None)
    j = idx - shortlist_size
    return DecodedToken("copy", int(source_ids[j]), j)


# ---------------------------------------------------------------------------
# Model configuration and parameter initialization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    task: str  # "rarest" | "seq2seq"
    vocab_size: int
    shortlist_size: int
    hidden: int = 128
    emb_dim: int = 32
    att_dim: int = 48
    readout_dim: int = 64
    switch_dim: int = 48
    switch_activation: str = "tanh"
    seq_len: int | None = None  # rarest only: width of the location projection
    pointer: bool = True
    unk_id: int = 0
    bos_id: int = 1
    eos_id: int = 2

    def __post_init__(self):
        if self.task not in ("rarest", "seq2seq"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "rarest" and self.pointer and self.seq_len is None:
            raise ValueError("rarest task needs seq_len for the switch input")
        if self.switch_activation not in ("tanh", "relu"):
            raise ValueError(f"unknown switch activation {self.switch_activation!r}")
        if not 0 < self.shortlist_size <= self.vocab_size:
            raise ValueError("need 0 < shortlist_size <= vocab_size")

    @property
    def output_size(self):
        """Width of the word softmax: the shortlist, except the summary-task
        baseline which scores the whole vocabulary."""
        if not self.pointer and self.task == "rarest":
            return self.vocab_size
        return self.shortlist_size

    def to_meta(self):
        return asdict(self)

    @staticmethod
    def from_meta(meta):
        return ModelConfig(**meta)


def build_model(cfg: ModelConfig, seed=0, dtype=np.float32, switch_bias_init=-1.0):
    """Recurrent and embedding weights are uniform(-0.08, 0.08); dense
    layers get fan-scaled (Glorot) ranges, which breaks attention/readout
    symmetry far faster at these widths; biases are zero except the final
    switch bias."""
    rng = np.random.default_rng(seed)
    store = nc.ParamStore(dtype)

    def u(name, shape):
        store.add(name, rng.uniform(-0.08, 0.08, size=shape))

    def dense(name, shape):
        lim = np.sqrt(6.0 / (shape[0] + shape[1]))
        store.add(name, rng.uniform(-lim, lim, size=shape))

    def readout_vec(name, shape):
        lim = np.sqrt(3.0 / shape[0])
        store.add(name, rng.uniform(-lim, lim, size=shape))

    def zeros(name, shape):
        store.add(name, np.zeros(shape))

    def gru(prefix, input_dim, hidden):
        for pname, shape in s2s.gru_param_shapes(input_dim, hidden).items():
            (u if pname.startswith("W") else zeros)(f"{prefix}.{pname}", shape)

    def switch(input_dim, k):
        dense("sw.W1", (k, input_dim))
        zeros("sw.b1", (k,))
        dense("sw.W2", (k, k))
        zeros("sw.b2", (k,))
        dense("sw.W3", (1, k))
        store.add("sw.b3", np.full((1,), switch_bias_init))

    e, h, a, r, k = cfg.emb_dim, cfg.hidden, cfg.att_dim, cfg.readout_dim, cfg.switch_dim
    u("emb", (cfg.vocab_size, e))
    if cfg.task == "seq2seq":
        u("bos_emb", (e,))
        gru("enc_fwd", e, h)
        gru("enc_bwd", e, h)
        dense("init.W", (h, h))
        zeros("init.b", (h,))
        dense("att.Wh", (a, 2 * h))
        zeros("att.b", (a,))
        dense("att.Ws", (a, h))
        dense("att.We", (a, e))
        readout_vec("att.v", (a,))
        gru("dec", e + 2 * h, h)
        dense("out.W1", (r, h + e + 2 * h))
        zeros("out.b1", (r,))
        dense("out.W2", (cfg.output_size, r))
        zeros("out.b2", (cfg.output_size,))
        if cfg.pointer:
            switch(3 * h, k)
        return Seq2SeqModel(cfg, store)
    gru("enc", e, h)
    dense("w.W1", (r, h))
    zeros("w.b1", (r,))
    dense("w.W2", (cfg.output_size, r))
    zeros("w.b2", (cfg.output_size,))
    if cfg.pointer:
        dense("loc.Wh", (a, h))
        zeros("loc.b", (a,))
        dense("loc.Wc", (a, h))
        readout_vec("loc.v", (a,))
        dense("sw.Pw", (k, cfg.shortlist_size))
        dense("sw.Pl", (k, cfg.seq_len))
        switch(2 * k, k)
    return RarestWordModel(cfg, store)


def _flat_targets(z_col, tgt_col, ptr_col, weights_data, shortlist_size):
    """Flat fused indices for one step; deferred pointers take the current
    attention argmax (no gradient flows through the label choice)."""
    ptr = ptr_col.copy()
    deferred = (z_col == 0) & (ptr == DEFERRED_PTR)
    if deferred.any():
        ptr[deferred] = np.argmax(weights_data[deferred], axis=-1)
    return np.where(z_col == 1, tgt_col, shortlist_size + ptr)


@dataclass
class StepTrace:
    """Per-step arrays extracted from a teacher-forced forward pass."""

    nll: np.ndarray  # (B, Ty)
    pred_flat: np.ndarray  # (B, Ty) fused (or plain softmax) argmax
    d: np.ndarray | None  # (B, Ty) switch probabilities, pointer models only


class Seq2SeqModel:
    """Attention encoder-decoder with the adaptive output layer on top
    (pointer=False drops switch and locations: a plain shortlist softmax)."""

    def __init__(self, cfg: ModelConfig, store: nc.ParamStore):
        self.cfg = cfg
        self.store = store

    # -- teacher-forced step loop ------------------------------------------

    def _steps(self, src, tgt, z, ptr, itemp):
        cfg = self.cfg
        ns = self.store.nodes()
        b, ty = tgt.shape
        enc = s2s.encode(src, ns, cfg.hidden)
        proj = s2s.annotation_projection(enc, ns)
        s = s2s.init_decoder_state(enc, ns)
        y_prev = None
        for t in range(ty):
            y_emb = s2s.prev_token_embedding(y_prev, b, ns)
            att = s2s.attend(s, y_emb, enc, ns, proj)
            if cfg.pointer:
                d = switch_prob(att.context, s, ns, itemp, cfg.switch_activation)
            else:
                d = None
            s = s2s.decoder_step(s, y_emb, att.context, ns)
            logits = s2s.deep_output(s, y_emb, att.context, ns)
            if cfg.pointer:
                w = nc.softmax(logits)
                fused = fuse(w, att.weights, d)
                flat = _flat_targets(
                    z[:, t], tgt[:, t], ptr[:, t], att.weights.data,
                    cfg.shortlist_size,
                )
                nll = nc.scale(nc.log_floor(nc.pick(fused, flat)), -1.0)
                yield {"fused": fused, "w": w, "att": att, "d": d, "nll": nll}
            else:
                shown = np.where(
                    tgt[:, t] < cfg.output_size, tgt[:, t], cfg.unk_id
                )
                nll = nc.cross_entropy(logits, shown)
                yield {"logits": logits, "nll": nll}
            y_prev = tgt[:, t]

    def batch_nll(self, batch, itemp=1.0):
        """Mean over the batch of per-sequence joint NLL; returns the loss
        node and the number of scored steps."""
        tgt = batch["target"]
        total = None
        for step in self._steps(
            batch["source"], tgt, batch["z"], batch["ptr"], itemp
        ):
            total = step["nll"] if total is None else nc.add(total, step["nll"])
        return nc.scale(nc.sum_all(total), 1.0 / tgt.shape[0]), tgt.size

    def batch_trace(self, batch, itemp=1.0):
        """Forward-only pass collecting per-step NLL, argmax and switch."""
        nlls, preds, ds = [], [], []
        for step in self._steps(
            batch["source"], batch["target"], batch["z"], batch["ptr"], itemp
        ):
            nlls.append(step["nll"].data)
            if self.cfg.pointer:
                preds.append(np.argmax(step["fused"].data, axis=-1))
                ds.append(step["d"].data[:, 0])
            else:
                preds.append(np.argmax(step["logits"].data, axis=-1))
        return StepTrace(
            np.stack(nlls, axis=1),
            np.stack(preds, axis=1),
            np.stack(ds, axis=1) if ds else None,
        )

    # -- public single-example surface -------------------------------------

    def step_outputs(self, source_ids, target_ids, itemp=1.0):
        """Teacher-forced StepOutput per target position (pointer models)."""
        src = np.asarray(source_ids)[None, :]
        tgt = np.asarray(target_ids)[None, :]
        ty = tgt.shape[1]
        z = np.ones((1, ty), dtype=np.int64)
        tgt_cols = np.where(tgt < self.cfg.shortlist_size, tgt, self.cfg.unk_id)
        ptr = np.full((1, ty), NO_PTR, dtype=np.int64)
        outs = []
        for step in self._steps(src, tgt_cols, z, ptr, itemp):
            outs.append(
                StepOutput(
                    step["w"].data[0].copy(),
                    step["att"].weights.data[0].copy(),
                    float(step["d"].data[0, 0]),
                    step["fused"].data[0].copy(),
                )
            )
        return outs

    def sequence_nll(self, source_ids, steps, target_ids=None, itemp=1.0):
        """Joint -log p(y, z | x) under teacher forcing, as a float.

        The fed tokens default to the observed ones: the word for z=1
        steps, the pointed source token for z=0 steps.
        """
        source_ids = np.asarray(source_ids)
        for st in steps:
            st.validate_against(len(source_ids))
        if target_ids is None:
            target_ids = [
                st.word if st.z == 1 else int(source_ids[st.location])
                for st in steps
            ]
        batch = {
            "source": source_ids[None, :],
            "target": np.asarray(target_ids)[None, :],
            "z": np.asarray([st.z for st in steps])[None, :],
            "ptr": np.asarray(
                [
                    DEFERRED_PTR if st.deferred else (
                        st.location if st.z == 0 else NO_PTR
                    )
                    for st in steps
                ]
            )[None, :],
        }
        loss, _ = self.batch_nll(batch, itemp)
        return float(loss.data)

    def greedy_decode(self, source_ids, max_len, itemp=1.0):
        """Argmax over the fused vector at every step; a location never
        terminates the sequence, the end-of-sequence word does."""
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        cfg = self.cfg
        source_ids = np.asarray(source_ids)
        src = source_ids[None, :]
        ns = self.store.nodes()
        enc = s2s.encode(src, ns, cfg.hidden)
        proj = s2s.annotation_projection(enc, ns)
        s = s2s.init_decoder_state(enc, ns)
        y_prev = None
        decoded = []
        for _ in range(max_len):
            y_emb = s2s.prev_token_embedding(y_prev, 1, ns)
            att = s2s.attend(s, y_emb, enc, ns, proj)
            s_next = s2s.decoder_step(s, y_emb, att.context, ns)
            logits = s2s.deep_output(s_next, y_emb, att.context, ns)
            if cfg.pointer:
                d = switch_prob(att.context, s, ns, itemp, cfg.switch_activation)
                fused = fuse(nc.softmax(logits), att.weights, d)
                tok = resolve_fused_argmax(fused.data[0], source_ids, cfg.shortlist_size)
            else:
                tok = DecodedToken("word", int(np.argmax(logits.data[0])), None)
            if tok.kind == "word" and tok.token_id == cfg.eos_id:
                break
            decoded.append(tok)
            y_prev = np.asarray([tok.token_id])
            s = s_next
        return decoded


class RarestWordModel:
    """Uni-directional GRU summary of the source; word and location heads
    conditioned on the summary only; the switch conditioned on learned
    projections of both heads' logit vectors."""

    def __init__(self, cfg: ModelConfig, store: nc.ParamStore):
        self.cfg = cfg
        self.store = store

    def _forward(self, src, itemp):
        cfg = self.cfg
        ns = self.store.nodes()
        src = np.asarray(src)
        if src.ndim != 2 or src.shape[1] == 0:
            raise ValueError("source must be a non-empty (B, T) id array")
        b, t = src.shape
        h = nc.as_node(np.zeros((b, cfg.hidden), dtype=self.store.dtype))
        states = []
        for j in range(t):
            h = s2s.gru_cell(h, nc.embed(ns["emb"], src[:, j]), ns, "enc")
            states.append(h)
        summary = h
        w_logits = nc.affine(
            ns["w.W2"],
            nc.tanh(nc.affine(ns["w.W1"], summary, ns["w.b1"])),
            ns["w.b2"],
        )
        if not cfg.pointer:
            return {"logits": w_logits}
        ann = nc.stack_time(states)
        pos = nc.affine(ns["loc.Wh"], ann, ns["loc.b"])
        q = nc.repeat_time(nc.linear(ns["loc.Wc"], summary), t)
        loc_logits = nc.matvec(nc.tanh(nc.add(pos, q)), ns["loc.v"])
        u = nc.concat(
            [nc.linear(ns["sw.Pw"], w_logits), nc.linear(ns["sw.Pl"], loc_logits)]
        )
        d = switch_mlp(u, ns, itemp, cfg.switch_activation)
        w = nc.softmax(w_logits)
        loc = nc.softmax(loc_logits)
        return {"w": w, "loc": loc, "d": d, "fused": fuse(w, loc, d)}

    def batch_nll(self, batch, itemp=1.0):
        src, tgt = batch["source"], batch["target"]
        out = self._forward(src, itemp)
        if self.cfg.pointer:
            flat = np.where(
                batch["z"][:, 0] == 1,
                tgt[:, 0],
                self.cfg.shortlist_size + batch["ptr"][:, 0],
            )
            nll = nc.scale(nc.log_floor(nc.pick(out["fused"], flat)), -1.0)
        else:
            nll = nc.cross_entropy(out["logits"], tgt[:, 0])
        return nc.scale(nc.sum_all(nll), 1.0 / tgt.shape[0]), tgt.size

    def batch_trace(self, batch, itemp=1.0):
        out = self._forward(batch["source"], itemp)
        if self.cfg.pointer:
            flat = np.where(
                batch["z"][:, 0] == 1,
                batch["target"][:, 0],
                self.cfg.shortlist_size + batch["ptr"][:, 0],
            )
            fused = out["fused"].data
            nll = -np.log(
                np.maximum(
                    np.take_along_axis(fused, flat[:, None], axis=-1)[:, 0],
                    PROB_FLOOR,
                )
            )
            return StepTrace(
                nll[:, None],
                np.argmax(fused, axis=-1)[:, None],
                out["d"].data,
            )
        logits = out["logits"].data
        m = logits.max(axis=-1, keepdims=True)
        e = np.exp(logits - m)
        lse = m[:, 0] + np.log(e.sum(axis=-1))
        picked = np.take_along_axis(
            logits, batch["target"][:, :1], axis=-1
        )[:, 0]
        return StepTrace(
            (lse - picked)[:, None],
            np.argmax(logits, axis=-1)[:, None],
            None,
        )

    def step_output(self, source_ids, itemp=1.0):
        out = self._forward(np.asarray(source_ids)[None, :], itemp)
        if not self.cfg.pointer:
            raise ValueError("baseline model has no fused step output")
        return StepOutput(
            out["w"].data[0].copy(),
            out["loc"].data[0].copy(),
            float(out["d"].data[0, 0]),
            out["fused"].data[0].copy(),
        )

    def sequence_nll(self, source_ids, steps, target_ids=None, itemp=1.0):
        source_ids = np.asarray(source_ids)
        if len(steps) != 1:
            raise ValueError("summary model scores single-step targets")
        steps[0].validate_against(len(source_ids))
        st = steps[0]
        if target_ids is None:
            target_ids = [
                st.word if st.z == 1 else int(source_ids[st.location])
            ]
        batch = {
            "source": source_ids[None, :],
            "target": np.asarray(target_ids)[None, :],
            "z": np.asarray([[st.z]]),
            "ptr": np.asarray([[st.location if st.z == 0 else NO_PTR]]),
        }
        loss, _ = self.batch_nll(batch, itemp)
        return float(loss.data)

    def greedy_decode(self, source_ids, max_len=1, itemp=1.0):
        del max_len  # single prediction per source
        source_ids = np.asarray(source_ids)
        out = self._forward(source_ids[None, :], itemp)
        if self.cfg.pointer:
            return [
                resolve_fused_argmax(
                    out["fused"].data[0], source_ids, self.cfg.shortlist_size
                )
            ]
        return [DecodedToken("word", int(np.argmax(out["logits"].data[0])), None)]


def model_from_checkpoint(path):
    """Rebuild a model (and its task/temperature meta) from a checkpoint."""
    store, meta = nc.load_checkpoint(path)
    cfg = ModelConfig.from_meta(meta["model"])
    model = build_model(cfg, seed=0, dtype=store.dtype)
    expected = {k: v.shape for k, v in model.store.values.items()}
    got = {k: v.shape for k, v in store.values.items()}
    if expected != got:
        raise nc.CheckpointError(
            f"{path}: slot layout does not match its model config"
        )
    model.store = store
    return model, meta
