"""Reference multimodal time-series classifier.

Each modality owns a linear embedding plus a small pre-LN transformer
encoder.  A masked-out modality bypasses its encoder entirely: the stream is
a broadcast learned missing-token, so the output is exactly independent of
that modality's raw input.  Streams are concatenated along time and fused by
a cross-modal encoder whose feed-forward sublayer is a top-k routed mixture
of experts (a single expert degenerates to a plain FFN).  Tokens are
mean-pooled into a linear classification head.

The prunable structure (query heads per attention layer, FFN hidden widths,
per-expert hidden widths) is carried explicitly in ``ModelStructure`` so a
surgically compacted model round-trips through the same forward code.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tz
from .attention import AttentionWeights, grouped_attention, top_u_count
from .tensor import TapSet, Tensor
from .validation import check_mask, check_streams


@dataclass
class BackboneConfig:
    """Architecture hyperparameters; defaults give single-digit-percent gate
    overhead relative to backbone parameters."""

    n_modalities: int = 6
    seq_len: int = 32
    input_dim: int = 8
    model_dim: int = 256
    n_classes: int = 4
    enc_depth: int = 1
    fusion_depth: int = 1
    ffn_dim: int = 64
    n_experts: int = 2
    top_k: int = 1
    n_heads: int = 8
    n_kv_groups: int = 2
    sparsity_const: int = 5
    sparse_attention: bool = True

    def __post_init__(self):
        dims = (self.n_modalities, self.seq_len, self.input_dim, self.model_dim,
                self.n_classes, self.enc_depth, self.fusion_depth, self.ffn_dim,
                self.n_experts, self.top_k, self.n_heads, self.n_kv_groups,
                self.sparsity_const)
        if any(int(v) <= 0 for v in dims):
            raise ValueError("all backbone dimensions must be positive")
        if self.top_k > self.n_experts:
            raise ValueError(f"top_k={self.top_k} exceeds n_experts={self.n_experts}")
        if self.n_heads % self.n_kv_groups != 0:
            raise ValueError("n_heads must be divisible by n_kv_groups")
        if self.model_dim % self.n_heads != 0:
            raise ValueError("model_dim must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


@dataclass
class AttnStructure:
    head_group: tuple[int, ...]
    n_groups: int
    head_dim: int


@dataclass
class ModelStructure:
    """Retained widths per layer; fresh models are uniform, pruned ones ragged."""

    attn: dict[str, AttnStructure]
    ffn: dict[str, int]
    experts: dict[str, tuple[int, ...]]

    @classmethod
    def uniform(cls, cfg: BackboneConfig) -> "ModelStructure":
        per_group = cfg.n_heads // cfg.n_kv_groups
        base = AttnStructure(
            head_group=tuple(h // per_group for h in range(cfg.n_heads)),
            n_groups=cfg.n_kv_groups,
            head_dim=cfg.head_dim,
        )
        attn, ffn, experts = {}, {}, {}
        for j in range(cfg.n_modalities):
            for i in range(cfg.enc_depth):
                key = f"mod{j}.enc{i}"
                attn[key] = AttnStructure(base.head_group, base.n_groups, base.head_dim)
                ffn[key] = cfg.ffn_dim
        for i in range(cfg.fusion_depth):
            key = f"fusion{i}"
            attn[key] = AttnStructure(base.head_group, base.n_groups, base.head_dim)
            experts[key] = tuple(cfg.ffn_dim for _ in range(cfg.n_experts))
        return cls(attn=attn, ffn=ffn, experts=experts)

    def to_dict(self) -> dict:
        return {
            "attn": {k: {"head_group": list(v.head_group), "n_groups": v.n_groups,
                         "head_dim": v.head_dim} for k, v in self.attn.items()},
            "ffn": dict(self.ffn),
            "experts": {k: list(v) for k, v in self.experts.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelStructure":
        return cls(
            attn={k: AttnStructure(tuple(v["head_group"]), int(v["n_groups"]),
                                   int(v["head_dim"])) for k, v in d["attn"].items()},
            ffn={k: int(v) for k, v in d["ffn"].items()},
            experts={k: tuple(int(w) for w in v) for k, v in d["experts"].items()},
        )

    def gate_group_specs(self) -> list[tuple[str, str, int]]:
        """Canonical (site, layer_key, n_units) list: all attention layers,
        then FFN layers, then per-expert channel groups."""
        specs = [("head", key, len(a.head_group)) for key, a in self.attn.items()]
        specs.extend(("ffn", key, w) for key, w in self.ffn.items())
        for key, widths in self.experts.items():
            specs.extend(("expert", f"{key}.e{e}", w) for e, w in enumerate(widths))
        return specs

    def unit_index(self) -> list[tuple[str, str, int]]:
        """Flat (site, layer_key, unit) enumeration in canonical order."""
        units = []
        for site, key, n in self.gate_group_specs():
            units.extend((site, key, u) for u in range(n))
        return units


class Backbone:
    """Parameter container plus the forward pass."""

    def __init__(self, cfg: BackboneConfig, structure: ModelStructure,
                 params: dict[str, Tensor]):
        self.cfg = cfg
        self.structure = structure
        self.params = params

    # -- construction -------------------------------------------------------

    @classmethod
    def create(cls, cfg: BackboneConfig, seed: int = 0) -> "Backbone":
        structure = ModelStructure.uniform(cfg)
        rng = np.random.default_rng([seed, 0xB0DE])
        p: dict[str, Tensor] = {}
        d = cfg.model_dim

        def norm(shape, s=None):
            return tz.param(shape, rng, s)

        for j in range(cfg.n_modalities):
            p[f"mod{j}.embed.w"] = norm((cfg.input_dim, d))
            p[f"mod{j}.embed.b"] = tz.param(np.zeros(d))
            p[f"missing.{j}"] = tz.param(rng.normal(0.0, 0.5, size=d))
        for key, a in structure.attn.items():
            n_heads, dk, n_groups = len(a.head_group), a.head_dim, a.n_groups
            for ln in ("ln1", "ln2"):
                p[f"{key}.{ln}.g"] = tz.param(np.ones(d))
                p[f"{key}.{ln}.b"] = tz.param(np.zeros(d))
            p[f"{key}.attn.wq"] = norm((d, n_heads * dk))
            p[f"{key}.attn.wk"] = norm((d, n_groups * dk))
            p[f"{key}.attn.wv"] = norm((d, n_groups * dk))
            p[f"{key}.attn.wo"] = norm((n_heads * dk, d))
            if key in structure.ffn:
                w = structure.ffn[key]
                p[f"{key}.ffn.w1"] = norm((d, w))
                p[f"{key}.ffn.b1"] = tz.param(np.zeros(w))
                p[f"{key}.ffn.w2"] = norm((w, d))
                p[f"{key}.ffn.b2"] = tz.param(np.zeros(d))
            if key in structure.experts:
                p[f"{key}.moe.router.w"] = norm((d, cfg.n_experts))
                for e, w in enumerate(structure.experts[key]):
                    p[f"{key}.moe.e{e}.w1"] = norm((d, w))
                    p[f"{key}.moe.e{e}.b1"] = tz.param(np.zeros(w))
                    p[f"{key}.moe.e{e}.w2"] = norm((w, d))
                    p[f"{key}.moe.e{e}.b2"] = tz.param(np.zeros(d))
        p["final_ln.g"] = tz.param(np.ones(d))
        p["final_ln.b"] = tz.param(np.zeros(d))
        p["head.w"] = norm((d, cfg.n_classes))
        p["head.b"] = tz.param(np.zeros(cfg.n_classes))
        return cls(cfg, structure, p)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def attention_weights(self, layer_key: str) -> AttentionWeights:
        a = self.structure.attn[layer_key]
        return AttentionWeights(
            wq=self.params[f"{layer_key}.attn.wq"],
            wk=self.params[f"{layer_key}.attn.wk"],
            wv=self.params[f"{layer_key}.attn.wv"],
            wo=self.params[f"{layer_key}.attn.wo"],
            head_group=a.head_group,
        )

    # -- forward ------------------------------------------------------------

    def _ln(self, x: Tensor, key: str) -> Tensor:
        y = tz.layer_norm(x, axis=-1)
        g = tz.tile_to(self.params[f"{key}.g"], y.shape)
        return tz.add(tz.mul(y, g), self.params[f"{key}.b"])

    def _attention(self, x: Tensor, layer_key: str, taps: TapSet | None,
                   attn_sink) -> Tensor:
        w = self.attention_weights(layer_key)
        return grouped_attention(
            x, w, sparse=self.cfg.sparse_attention,
            sparsity_const=self.cfg.sparsity_const,
            attn_sink=attn_sink, layer_key=layer_key,
            tap_set=taps, tap_key=f"head:{layer_key}",
        )

    def _ffn(self, x: Tensor, layer_key: str, taps: TapSet | None) -> Tensor:
        hid = tz.gelu(tz.add(tz.matmul(x, self.params[f"{layer_key}.ffn.w1"]),
                             self.params[f"{layer_key}.ffn.b1"]))
        if taps is not None:
            taps.register_tap(hid, f"ffn:{layer_key}")
        return tz.add(tz.matmul(hid, self.params[f"{layer_key}.ffn.w2"]),
                      self.params[f"{layer_key}.ffn.b2"])

    def encode_modality(self, x_j: np.ndarray | None, present: bool, j: int,
                        batch: int, taps: TapSet | None = None,
                        attn_sink=None) -> Tensor:
        """One modality stream: embed + encoder stack when present, the
        broadcast missing-token otherwise."""
        cfg = self.cfg
        if not present:
            return tz.tile_to(self.params[f"missing.{j}"],
                              (batch, cfg.seq_len, cfg.model_dim))
        if x_j is None:
            raise ValueError(f"modality {j} marked present but data is missing")
        h = tz.add(tz.matmul(tz.Tensor(x_j), self.params[f"mod{j}.embed.w"]),
                   self.params[f"mod{j}.embed.b"])
        for i in range(cfg.enc_depth):
            key = f"mod{j}.enc{i}"
            h = tz.add(h, self._attention(self._ln(h, f"{key}.ln1"), key, taps, attn_sink))
            h = tz.add(h, self._ffn(self._ln(h, f"{key}.ln2"), key, taps))
        return h

    def moe_ffn(self, tokens: Tensor, layer_key: str, taps: TapSet | None) -> Tensor:
        """Route each token to its top-k experts by router logits and combine
        with softmax weights renormalized over the selected experts."""
        n_experts = len(self.structure.experts[layer_key])
        router = tz.matmul(tokens, self.params[f"{layer_key}.moe.router.w"])
        top_k = min(self.cfg.top_k, n_experts)
        sel = np.argsort(-router.values, axis=1, kind="stable")[:, :top_k]
        weights = tz.softmax(tz.gather_elements(router, sel), axis=-1)
        w_flat = tz.reshape(weights, (weights.size,))
        n_tok = tokens.shape[0]
        zero = tz.Tensor(np.zeros(self.cfg.model_dim))
        out = None
        for e in range(n_experts):
            rows, slots = np.nonzero(sel == e)
            if rows.size == 0:
                continue
            xe = tz.gather_rows(tokens, rows)
            hid = tz.gelu(tz.add(tz.matmul(xe, self.params[f"{layer_key}.moe.e{e}.w1"]),
                                 self.params[f"{layer_key}.moe.e{e}.b1"]))
            if taps is not None:
                taps.register_tap(hid, f"expert:{layer_key}.e{e}")
            ye = tz.add(tz.matmul(hid, self.params[f"{layer_key}.moe.e{e}.w2"]),
                        self.params[f"{layer_key}.moe.e{e}.b2"])
            ye = tz.scale_rows(ye, tz.gather_rows(w_flat, rows * top_k + slots))
            piece = tz.scatter_rows_fill(ye, zero, rows, n_tok)
            out = piece if out is None else tz.add(out, piece)
        return out

    def fuse_and_classify(self, streams: list[Tensor], taps: TapSet | None = None,
                          attn_sink=None) -> Tensor:
        """Concatenate streams along time, run the fusion encoder, mean-pool,
        and project to class logits."""
        h = tz.concat(streams, axis=-2)
        batch, n_tok, d = h.shape
        for i in range(self.cfg.fusion_depth):
            key = f"fusion{i}"
            h = tz.add(h, self._attention(self._ln(h, f"{key}.ln1"), key, taps, attn_sink))
            tokens = tz.reshape(self._ln(h, f"{key}.ln2"), (batch * n_tok, d))
            moe = self.moe_ffn(tokens, key, taps)
            h = tz.add(h, tz.reshape(moe, (batch, n_tok, d)))
        h = self._ln(h, "final_ln")
        pooled = tz.mean(h, axis=-2)
        return tz.add(tz.matmul(pooled, self.params["head.w"]), self.params["head.b"])

    def forward(self, x: np.ndarray, mask, taps: TapSet | None = None,
                attn_sink=None) -> Tensor:
        """Class logits for a batch of multimodal windows under a mask."""
        cfg = self.cfg
        x = check_streams(x, cfg.n_modalities, cfg.seq_len, cfg.input_dim)
        mask = check_mask(mask, cfg.n_modalities)
        batch = x.shape[0]
        streams = [
            self.encode_modality(x[:, j] if mask[j] else None, bool(mask[j]), j,
                                 batch, taps, attn_sink)
            for j in range(cfg.n_modalities)
        ]
        return self.fuse_and_classify(streams, taps, attn_sink)

    def predict(self, x: np.ndarray, mask) -> np.ndarray:
        return np.argmax(self.forward(x, mask).values, axis=-1)
