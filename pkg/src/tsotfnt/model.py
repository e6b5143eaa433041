"""Factorized transducer with a two-state vocabulary predictor.

Three variants share one class:

``integrated``
    ``<cc>`` is a special (non-vocabulary) output predicted by the joint
    network next to blank.  The vocabulary predictor keeps one recurrent state
    per virtual channel and switches state whenever ``<cc>`` is consumed,
    emitting an all-zero logit row at that position.
``naive``
    ``<cc>`` is treated as an ordinary vocabulary token: single-state
    vocabulary predictor over V+1 outputs, joint network predicts blank only.
``tsot_baseline``
    Plain transducer: one prediction network and a joint over all V+2 outputs.

Lattice columns always follow token ids: ``0..V-1`` vocabulary, ``V`` blank,
``V+1`` ``<cc>``.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import ParamStore, Tensor
from .numerics.tensor import _lstm_step

VARIANTS = ("integrated", "naive", "tsot_baseline")


@dataclass
class ModelConfig:
    variant: str = "integrated"
    vocab_size: int = 30
    feat_dim: int = 16
    subsample: int = 1
    enc_layers: int = 2
    enc_dim: int = 128
    special_layers: int = 1
    special_dim: int = 64
    vocab_layers: int = 2
    vocab_dim: int = 128
    joint_dim: int = 64
    vocab_path: str | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.subsample < 1:
            raise ValueError("subsample must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=2)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


LayerState = list  # [(h, c), ...] per layer, numpy arrays of shape (1, hidden)


@dataclass
class PredictorState:
    """Recurrent state of the prediction networks for one hypothesis.

    ``c0``/``c1`` are the two vocabulary-predictor channel states and ``j`` the
    active one; ``special`` is the special (or baseline) predictor state.
    """

    special: LayerState
    c0: LayerState = field(default_factory=list)
    c1: LayerState = field(default_factory=list)
    j: int = 0

    def to_bytes(self) -> bytes:
        arrays = {"j": np.array([self.j], dtype=np.int64)}
        for name, st in (("special", self.special), ("c0", self.c0), ("c1", self.c1)):
            for k, (h, c) in enumerate(st):
                arrays[f"{name}.{k}.h"] = h
                arrays[f"{name}.{k}.c"] = c
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PredictorState":
        data = np.load(io.BytesIO(raw))
        out = {}
        for name in ("special", "c0", "c1"):
            layers = []
            k = 0
            while f"{name}.{k}.h" in data:
                layers.append((data[f"{name}.{k}.h"], data[f"{name}.{k}.c"]))
                k += 1
            out[name] = layers
        return cls(out["special"], out["c0"], out["c1"], int(data["j"][0]))


@dataclass
class ForwardOutput:
    lattice: Tensor  # (B, T, U+1, V+2) log-probs
    vocab_logp: Tensor | None  # (B, U+1, Vw) z_u^v, None for the baseline
    t_lens: np.ndarray
    pred_inputs: np.ndarray  # (B, U+1) predictor inputs incl. start symbol


def _zeros_state(layers: int, batch: int, dim: int, dtype) -> list[tuple[Tensor, Tensor]]:
    return [(Tensor(np.zeros((batch, dim), dtype=dtype)), Tensor(np.zeros((batch, dim), dtype=dtype)))
            for _ in range(layers)]


class Transducer:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.params = ParamStore(dtype)
        self.V = cfg.vocab_size
        self.blank_id = self.V
        self.cc_id = self.V + 1
        self.K = self.V + 2
        self._init_params(seed)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    @property
    def vocab_width(self) -> int:
        """Width of the vocabulary branch output."""
        return self.V + 1 if self.variant == "naive" else self.V

    @property
    def is_factorized(self) -> bool:
        return self.variant != "tsot_baseline"

    # ------------------------------------------------------------------ init
    def _init_params(self, seed: int) -> None:
        cfg, P = self.cfg, self.params

        def rng(k):
            return np.random.default_rng([seed, k])

        r = rng(0)
        d_in = cfg.feat_dim * cfg.subsample
        P.add_uniform("encoder.in.w", (d_in, cfg.enc_dim), d_in, r)
        P.add_uniform("encoder.in.b", (cfg.enc_dim,), d_in, r)
        self._add_lstm("encoder", cfg.enc_layers, cfg.enc_dim, cfg.enc_dim, r)

        if self.is_factorized:
            r = rng(1)
            P.add_uniform("special.embed", (self.V + 2, cfg.special_dim), cfg.special_dim, r)
            self._add_lstm("special", cfg.special_layers, cfg.special_dim, cfg.special_dim, r)
            # the vocabulary predictor draws from its own stream so its
            # initialization is independent of everything else
            r = rng(2)
            rows = self.V + 2 if self.variant == "naive" else self.V + 1
            P.add_uniform("vocab.embed", (rows, cfg.vocab_dim), cfg.vocab_dim, r)
            self._add_lstm("vocab", cfg.vocab_layers, cfg.vocab_dim, cfg.vocab_dim, r)
            P.add_uniform("vocab.out.w", (cfg.vocab_dim, self.vocab_width), cfg.vocab_dim, r)
            P.add_uniform("vocab.out.b", (self.vocab_width,), cfg.vocab_dim, r)
            r = rng(3)
            n_special = 2 if self.variant == "integrated" else 1
            pred_dim = cfg.special_dim
        else:
            r = rng(1)
            P.add_uniform("predictor.embed", (self.V + 2, cfg.vocab_dim), cfg.vocab_dim, r)
            self._add_lstm("predictor", cfg.vocab_layers, cfg.vocab_dim, cfg.vocab_dim, r)
            r = rng(3)
            n_special = self.K
            pred_dim = cfg.vocab_dim
        P.add_uniform("joint.enc.w", (cfg.enc_dim, cfg.joint_dim), cfg.enc_dim, r)
        P.add_uniform("joint.enc.b", (cfg.joint_dim,), cfg.enc_dim, r)
        P.add_uniform("joint.pred.w", (pred_dim, cfg.joint_dim), pred_dim, r)
        P.add_uniform("joint.out.w", (cfg.joint_dim, n_special), cfg.joint_dim, r)
        P.add_uniform("joint.out.b", (n_special,), cfg.joint_dim, r)
        if self.is_factorized:
            P.add_uniform("joint.vocab_enc.w", (cfg.enc_dim, self.vocab_width), cfg.enc_dim, r)
            P.add_uniform("joint.vocab_enc.b", (self.vocab_width,), cfg.enc_dim, r)

    def _add_lstm(self, prefix: str, layers: int, in_dim: int, hid: int, r) -> None:
        for k in range(layers):
            n_in = in_dim if k == 0 else hid
            self.params.add_uniform(f"{prefix}.lstm{k}.w", (n_in + hid, 4 * hid), n_in + hid, r)
            self.params.add_uniform(f"{prefix}.lstm{k}.b", (4 * hid,), n_in + hid, r)

    def _lstm_names(self, prefix: str) -> list[tuple[str, str]]:
        out, k = [], 0
        while f"{prefix}.lstm{k}.w" in self.params:
            out.append((f"{prefix}.lstm{k}.w", f"{prefix}.lstm{k}.b"))
            k += 1
        return out

    def predictor_param_names(self) -> list[str]:
        return self.params.names("vocab.")

    # --------------------------------------------------------------- encoder
    def encode(self, feats: np.ndarray, lens: Sequence[int] | None = None) -> tuple[Tensor, np.ndarray]:
        """Causal encoder over (B, T_in, d) or (T_in, d) features."""
        feats = np.asarray(feats, dtype=self.params.dtype)
        if feats.ndim == 2:
            feats = feats[None]
        B, T_in, d = feats.shape
        if T_in < 1:
            raise ValueError("encode: empty input")
        if d != self.cfg.feat_dim:
            raise nx.ShapeError(f"encode: feature dim {d} != configured {self.cfg.feat_dim}")
        if not np.all(np.isfinite(feats)):
            raise ValueError("encode: non-finite features")
        lens = np.full(B, T_in) if lens is None else np.asarray(lens)
        s = self.cfg.subsample
        T = -(-T_in // s)
        if T * s != T_in:
            feats = np.concatenate([feats, np.zeros((B, T * s - T_in, d), dtype=feats.dtype)], axis=1)
        x = Tensor(feats.reshape(B, T, s * d))
        P = self.params
        x = nx.linear(x, P["encoder.in.w"], P["encoder.in.b"])
        for w, b in self._lstm_names("encoder"):
            x = nx.lstm_layer(x, P[w], P[b])
        return x, -(-lens // s)

    # ------------------------------------------------------------ predictors
    def _run_stack(self, prefix: str, x: Tensor) -> Tensor:
        for w, b in self._lstm_names(prefix):
            x = nx.lstm_layer(x, self.params[w], self.params[b])
        return x

    def _stack_step(self, prefix: str, x: Tensor, state):
        new = []
        for (w, b), (h, c) in zip(self._lstm_names(prefix), state):
            h2, c2 = nx.lstm_cell(x, h, c, self.params[w], self.params[b])
            new.append((h2, c2))
            x = h2
        return x, new

    def special_run(self, pred_in: np.ndarray) -> Tensor:
        prefix = "special" if self.is_factorized else "predictor"
        x = nx.embedding(self.params[f"{prefix}.embed"], pred_in)
        return self._run_stack(prefix, x)

    def vocab_predictor_run(self, pred_in: np.ndarray) -> Tensor:
        """Vocabulary-predictor logit rows for (B, U+1) inputs starting with
        the start symbol.  Integrated variant: two channel states, zero rows
        at ``<cc>``.  Naive: a single-state LM over V+1 tokens."""
        pred_in = np.asarray(pred_in, dtype=np.int64)
        if pred_in.ndim == 1:
            pred_in = pred_in[None]
        if np.any(pred_in[:, 1:] == self.blank_id):
            raise ValueError("blank may only appear as the start symbol")
        P = self.params
        if self.variant == "naive":
            hs = self._run_stack("vocab", nx.embedding(P["vocab.embed"], pred_in))
            # per-step projection keeps rows bit-identical to step-wise decoding
            return nx.stack([nx.linear(nx.getitem(hs, (slice(None), u)), P["vocab.out.w"], P["vocab.out.b"])
                             for u in range(pred_in.shape[1])], axis=1)
        if self.variant != "integrated":
            raise ValueError("the baseline has no vocabulary predictor")
        B, U1 = pred_in.shape
        dt = P.dtype
        table, ow, ob = P["vocab.embed"], P["vocab.out.w"], P["vocab.out.b"]
        zero_row = Tensor(np.zeros((B, self.V), dtype=dt))
        state0 = _zeros_state(len(self._lstm_names("vocab")), B, self.cfg.vocab_dim, dt)
        out, c0 = self._stack_step("vocab", nx.embedding(table, pred_in[:, 0]), state0)
        c1 = list(c0)
        rows = [nx.linear(out, ow, ob)]
        j = np.zeros(B, dtype=np.int64)
        for u in range(1, U1):
            tok = pred_in[:, u]
            is_cc = tok == self.cc_id
            on1 = (j == 1)[:, None]
            state_in = [(nx.where(on1, h1, h0), nx.where(on1, s1, s0))
                        for (h0, s0), (h1, s1) in zip(c0, c1)]
            x = nx.embedding(table, np.where(is_cc, self.blank_id, tok))
            out, new = self._stack_step("vocab", x, state_in)
            upd0 = (~is_cc & (j == 0))[:, None]
            upd1 = (~is_cc & (j == 1))[:, None]
            c0 = [(nx.where(upd0, nh, h), nx.where(upd0, ns, s)) for (nh, ns), (h, s) in zip(new, c0)]
            c1 = [(nx.where(upd1, nh, h), nx.where(upd1, ns, s)) for (nh, ns), (h, s) in zip(new, c1)]
            rows.append(nx.where(is_cc[:, None], zero_row, nx.linear(out, ow, ob)))
            j = np.where(is_cc, 1 - j, j)
        return nx.stack(rows, axis=1)

    def vocab_targets(self, labels: np.ndarray) -> np.ndarray:
        """Map label ids into vocabulary-branch columns (naive: ``<cc>`` -> V)."""
        if self.variant == "naive":
            return np.where(labels == self.cc_id, self.V, labels)
        return labels

    # ---------------------------------------------------------------- joint
    def _lattice(self, enc: Tensor, g: Tensor, vocab_logits: Tensor | None):
        P = self.params
        ej = nx.linear(enc, P["joint.enc.w"], P["joint.enc.b"])
        pj = nx.matmul(g, P["joint.pred.w"])
        hid = nx.tanh(nx.add(nx.expand_dims(ej, 2), nx.expand_dims(pj, 1)))
        zs = nx.linear(hid, P["joint.out.w"], P["joint.out.b"])
        if not self.is_factorized:
            return nx.log_softmax(zs), None
        zv = nx.log_softmax(vocab_logits)
        hv = nx.linear(enc, P["joint.vocab_enc.w"], P["joint.vocab_enc.b"])
        zvt = nx.add(nx.expand_dims(hv, 2), nx.expand_dims(zv, 1))
        if self.variant == "integrated":
            logits = nx.concat([zvt, zs], axis=-1)
        else:
            logits = nx.concat([nx.getitem(zvt, (Ellipsis, slice(0, self.V))), zs,
                                nx.getitem(zvt, (Ellipsis, slice(self.V, None)))], axis=-1)
        return nx.log_softmax(logits), zv

    def forward(self, feats: np.ndarray, feat_lens, labels: np.ndarray) -> ForwardOutput:
        """Full lattice for a padded batch.  ``labels`` is (B, U) padded."""
        enc, t_lens = self.encode(feats, feat_lens)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim == 1:
            labels = labels[None]
        B = labels.shape[0]
        pred_in = np.concatenate([np.full((B, 1), self.blank_id, dtype=np.int64), labels], axis=1)
        g = self.special_run(pred_in)
        vl = self.vocab_predictor_run(pred_in) if self.is_factorized else None
        lattice, zv = self._lattice(enc, g, vl)
        return ForwardOutput(lattice, zv, t_lens, pred_in)

    def assemble_lattice(self, enc: Tensor, labels: Sequence[int]) -> ForwardOutput:
        labels = np.asarray(labels, dtype=np.int64)[None]
        pred_in = np.concatenate([[[self.blank_id]], labels], axis=1)
        if enc.ndim == 2:
            enc = nx.expand_dims(enc, 0)
        g = self.special_run(pred_in)
        vl = self.vocab_predictor_run(pred_in) if self.is_factorized else None
        lattice, zv = self._lattice(enc, g, vl)
        return ForwardOutput(lattice, zv, np.array([enc.shape[1]]), pred_in)

    # ------------------------------------------------------- step-wise form
    def _np_stack_step(self, prefix: str, x: np.ndarray, state: LayerState):
        new = []
        for (w, b), (h, c) in zip(self._lstm_names(prefix), state):
            h2, c2, _ = _lstm_step(x, h, c, self.params[w].data, self.params[b].data)
            new.append((h2, c2))
            x = h2
        return x, new

    def _np_zero_state(self, prefix: str, n: int) -> LayerState:
        dim = self.cfg.vocab_dim if prefix in ("vocab", "predictor") else self.cfg.special_dim
        dt = self.params.dtype
        return [(np.zeros((n, dim), dt), np.zeros((n, dim), dt)) for _ in self._lstm_names(prefix)]

    def _vocab_logits(self, out: np.ndarray) -> np.ndarray:
        return out @ self.params["vocab.out.w"].data + self.params["vocab.out.b"].data

    def vocab_predictor_step(self, y: int, state: PredictorState) -> tuple[np.ndarray, PredictorState]:
        """One step of the vocabulary predictor on a single hypothesis.

        ``<cc>`` yields a zero row and toggles the channel; any other token
        advances the active channel state.  Returns logits of shape (Vw,).
        """
        if self.variant == "integrated" and y == self.cc_id:
            return (np.zeros(self.V, dtype=self.params.dtype),
                    PredictorState(state.special, state.c0, state.c1, 1 - state.j))
        if y == self.blank_id:
            raise ValueError("blank is not a predictor input after the start")
        active = state.c1 if state.j == 1 else state.c0
        x = self.params["vocab.embed"].data[np.array([y])]
        out, new = self._np_stack_step("vocab", x, active)
        if state.j == 1:
            nxt = PredictorState(state.special, state.c0, new, 1)
        else:
            nxt = PredictorState(state.special, new, state.c1, 0)
        return self._vocab_logits(out)[0], nxt

    def special_step(self, y: int, state: PredictorState) -> tuple[np.ndarray, PredictorState]:
        prefix = "special" if self.is_factorized else "predictor"
        x = self.params[f"{prefix}.embed"].data[np.array([y])]
        out, new = self._np_stack_step(prefix, x, state.special)
        return out[0], PredictorState(new, state.c0, state.c1, state.j)

    def initial_state(self):
        """Consume the start symbol; returns (g, vocab_logits, state)."""
        prefix = "special" if self.is_factorized else "predictor"
        st = PredictorState(self._np_zero_state(prefix, 1))
        g, st = self.special_step(self.blank_id, st)
        if not self.is_factorized:
            return g, None, st
        st = PredictorState(st.special, self._np_zero_state("vocab", 1), [], 0)
        x = self.params["vocab.embed"].data[np.array([self.blank_id])]
        out, c0 = self._np_stack_step("vocab", x, st.c0)
        st = PredictorState(st.special, c0, list(c0), 0)
        return g, self._vocab_logits(out)[0], st

    def step(self, y: int, state: PredictorState):
        """Consume an emitted label: returns (g, vocab_logits or None, state)."""
        g, state = self.special_step(y, state)
        if not self.is_factorized:
            return g, None, state
        h, state = self.vocab_predictor_step(y, state)
        return g, h, state

    def step_batch(self, ys: Sequence[int], states: Sequence[PredictorState]):
        """Batched :meth:`step` over several hypotheses (used by beam search)."""
        n = len(ys)
        if n == 1:
            g, h, st = self.step(ys[0], states[0])
            return [g], [h], [st]
        prefix = "special" if self.is_factorized else "predictor"
        ys_arr = np.asarray(ys, dtype=np.int64)
        sp = [tuple(np.concatenate([s.special[k][i] for s in states]) for i in (0, 1))
              for k in range(len(states[0].special))]
        g, sp_new = self._np_stack_step(prefix, self.params[f"{prefix}.embed"].data[ys_arr], sp)
        specials = [[(h[i:i + 1], c[i:i + 1]) for h, c in sp_new] for i in range(n)]
        if not self.is_factorized:
            return list(g), [None] * n, [PredictorState(specials[i]) for i in range(n)]
        outs: list = [None] * n
        new_states: list = [None] * n
        run = []
        for i, (y, s) in enumerate(zip(ys, states)):
            if self.variant == "integrated" and y == self.cc_id:
                outs[i] = np.zeros(self.V, dtype=self.params.dtype)
                new_states[i] = PredictorState(specials[i], s.c0, s.c1, 1 - s.j)
            else:
                run.append(i)
        if run:
            act = [states[i].c1 if states[i].j == 1 else states[i].c0 for i in run]
            vs = [tuple(np.concatenate([a[k][q] for a in act]) for q in (0, 1))
                  for k in range(len(act[0]))]
            x = self.params["vocab.embed"].data[ys_arr[run]]
            out, v_new = self._np_stack_step("vocab", x, vs)
            logits = self._vocab_logits(out)
            for r, i in enumerate(run):
                layer = [(h[r:r + 1], c[r:r + 1]) for h, c in v_new]
                s = states[i]
                if s.j == 1:
                    new_states[i] = PredictorState(specials[i], s.c0, layer, 1)
                else:
                    new_states[i] = PredictorState(specials[i], layer, s.c1, 0)
                outs[i] = logits[r]
        return list(g), outs, new_states

    def joint_precompute(self, enc: np.ndarray):
        """Per-frame joint terms for decoding: (enc projection, acoustic vocab term)."""
        P = self.params
        ej = enc @ P["joint.enc.w"].data + P["joint.enc.b"].data
        hv = enc @ P["joint.vocab_enc.w"].data + P["joint.vocab_enc.b"].data if self.is_factorized else None
        return ej, hv

    def pred_project(self, g: np.ndarray) -> np.ndarray:
        return g @ self.params["joint.pred.w"].data

    def joint_step(self, ej_t: np.ndarray, hv_t, pj: np.ndarray, vocab_logp) -> np.ndarray:
        """Normalized log-distribution over all V+2 outputs for N hypotheses at
        one frame.  ``pj`` (N, J) projected special outputs, ``vocab_logp``
        (N, Vw) log-softmaxed vocabulary rows."""
        P = self.params
        hid = np.tanh(ej_t[None, :] + pj)
        zs = hid @ P["joint.out.w"].data + P["joint.out.b"].data
        if not self.is_factorized:
            logits = zs
        else:
            zv = hv_t[None, :] + vocab_logp
            if self.variant == "integrated":
                logits = np.concatenate([zv, zs], axis=-1)
            else:
                logits = np.concatenate([zv[:, :self.V], zs, zv[:, self.V:]], axis=-1)
        m = logits.max(axis=-1, keepdims=True)
        return logits - (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))

    # ----------------------------------------------------------- persistence
    def save(self, path, extra_arrays=None, meta=None) -> None:
        arrays = dict(self.params.state_dict())
        if extra_arrays:
            arrays.update(extra_arrays)
        m = {"model_config": self.cfg.to_json(), "kind": "transducer"}
        m.update(meta or {})
        nx.save_arrays(path, arrays, m)

    @classmethod
    def load(cls, path, dtype=np.float32) -> tuple["Transducer", dict, dict]:
        arrays, meta = nx.load_arrays(path)
        cfg = ModelConfig.from_json(meta["model_config"])
        model = cls(cfg, dtype=dtype)
        model.params.load_state_dict({n: a for n, a in arrays.items() if n in model.params})
        extra = {n: a for n, a in arrays.items() if n not in model.params}
        return model, meta, extra


def log_softmax_np(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1, keepdims=True)
    return v - (m + np.log(np.exp(v - m).sum(axis=-1, keepdims=True)))
