"""Latent world model: encoders, recurrent transition, and prediction heads.

Components and the shapes they map between:

  static encoder   raw static row            -> static embedding b   (d_b)
  state encoder    [standardised state; b]   -> latent z             (d_z)
  action encoder   [structured; comm emb.]   -> action embedding u   (d_u)
  transition       GRU(h_prev, [z; u])       -> hidden h             (d_h)
  heads            [h; b; next-period time]  -> (target estimate, next latent)

All functions operate on diffcore Tensors so a Tape can record them; they
accept plain arrays too and wrap them as constants. Rows are batch entries.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from numpy.lib import format as npformat

from . import diffcore as dc

CHECKPOINT_VERSION = 1

ACTION_ENCODER_VARIANTS = ("wide", "split")


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and switches that fully determine the parameter shapes."""

    d_x: int
    d_a_struct: int
    d_a_comm: int
    d_tau: int
    d_static_in: int
    d_b: int = 64
    d_z: int = 128
    d_u: int = 128
    d_h: int = 256
    dropout: float = 0.05
    context_len: int = 6
    action_encoder: str = "wide"
    seed: int = 0

    def __post_init__(self):
        dims = {
            "d_x": self.d_x,
            "d_a_struct": self.d_a_struct,
            "d_a_comm": self.d_a_comm,
            "d_tau": self.d_tau,
            "d_static_in": self.d_static_in,
            "d_b": self.d_b,
            "d_z": self.d_z,
            "d_u": self.d_u,
            "d_h": self.d_h,
            "context_len": self.context_len,
        }
        for name, v in dims.items():
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.action_encoder not in ACTION_ENCODER_VARIANTS:
            raise ValueError(f"action_encoder must be one of {ACTION_ENCODER_VARIANTS}")

    @property
    def d_a(self) -> int:
        return self.d_a_struct + self.d_a_comm

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


def ckd_config(seed: int = 0, **overrides) -> ModelConfig:
    """The kidney-cohort instantiation: 9 state dims, 62+256 action dims,
    6 time covariates, 52 static inputs."""
    base = dict(
        d_x=9,
        d_a_struct=62,
        d_a_comm=256,
        d_tau=6,
        d_static_in=52,
        seed=seed,
    )
    base.update(overrides)
    return ModelConfig(**base)


class ModelParams:
    """Named parameter tensors, ordered for stable iteration and checkpoints."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, dc.Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> dc.Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> list[dc.Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return sum(t.value.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.cfg,
            {k: dc.parameter(t.value.copy(), name=k) for k, t in self.tensors.items()},
        )

    def gru_weights(self) -> dc.GruWeights:
        t = self.tensors
        return dc.GruWeights(
            t["gru.reset_w"], t["gru.reset_b"],
            t["gru.update_w"], t["gru.update_b"],
            t["gru.cand_w"], t["gru.cand_b"],
        )


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    d_sb = cfg.d_x + cfg.d_b
    d_head_in = cfg.d_h + cfg.d_b + cfg.d_tau
    d_gru_in = cfg.d_z + cfg.d_u + cfg.d_h
    shapes: dict[str, tuple[int, int]] = {
        "static.w": (cfg.d_b, cfg.d_static_in),
        "static.b": (1, cfg.d_b),
        "state.w1": (cfg.d_h, d_sb),
        "state.b1": (1, cfg.d_h),
        "state.w2": (cfg.d_z, cfg.d_h),
        "state.b2": (1, cfg.d_z),
    }
    if cfg.action_encoder == "wide":
        shapes.update({
            "action.w1": (cfg.d_h, cfg.d_a),
            "action.b1": (1, cfg.d_h),
            "action.w2": (cfg.d_u, cfg.d_h),
            "action.b2": (1, cfg.d_u),
        })
    else:
        shapes.update({
            "action.struct_w1": (cfg.d_h, cfg.d_a_struct),
            "action.struct_b1": (1, cfg.d_h),
            "action.comm_w1": (cfg.d_h, cfg.d_a_comm),
            "action.comm_b1": (1, cfg.d_h),
            "action.proj_w": (cfg.d_u, 2 * cfg.d_h),
            "action.proj_b": (1, cfg.d_u),
        })
    shapes.update({
        "gru.reset_w": (cfg.d_h, d_gru_in),
        "gru.reset_b": (1, cfg.d_h),
        "gru.update_w": (cfg.d_h, d_gru_in),
        "gru.update_b": (1, cfg.d_h),
        "gru.cand_w": (cfg.d_h, d_gru_in),
        "gru.cand_b": (1, cfg.d_h),
        "head_y.w1": (cfg.d_h, d_head_in),
        "head_y.b1": (1, cfg.d_h),
        "head_y.w2": (1, cfg.d_h),
        "head_y.b2": (1, 1),
        "head_z.w1": (cfg.d_h, d_head_in),
        "head_z.b1": (1, cfg.d_h),
        "head_z.w2": (cfg.d_z, cfg.d_h),
        "head_z.b2": (1, cfg.d_z),
    })
    return shapes


def _is_bias(name: str) -> bool:
    leaf = name.split(".")[-1].split("_")[-1]
    return leaf.startswith("b")


def init_params(cfg: ModelConfig) -> ModelParams:
    """Fan-in uniform weights (+-1/sqrt(fan_in)), zero biases; seeded."""
    rng = np.random.default_rng(cfg.seed)
    tensors: dict[str, dc.Tensor] = {}
    for name, shape in _param_shapes(cfg).items():
        if _is_bias(name):
            value = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            value = rng.uniform(-bound, bound, size=shape)
        tensors[name] = dc.parameter(value, name=name)
    return ModelParams(cfg, tensors)


def _as_tensor(x) -> dc.Tensor:
    return x if isinstance(x, dc.Tensor) else dc.constant(x)


def _maybe_dropout(t: dc.Tensor, rate: float, rng: np.random.Generator | None) -> dc.Tensor:
    if rng is None or rate <= 0.0:
        return t
    mask = dc.dropout_mask(rng, t.shape, rate)
    return dc.mul(t, dc.constant(mask))


def _mlp2(x: dc.Tensor, p: ModelParams, prefix: str,
          drop_rng: np.random.Generator | None) -> dc.Tensor:
    h = dc.gelu(dc.affine(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    h = _maybe_dropout(h, p.cfg.dropout, drop_rng)
    return dc.affine(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def encode_static(static_raw, p: ModelParams) -> dc.Tensor:
    """Embed raw static covariates; the same embedding feeds the state
    encoder and the prediction heads."""
    x = _as_tensor(static_raw)
    if x.cols != p.cfg.d_static_in:
        raise dc.DiffcoreError(f"static input dim {x.cols} != {p.cfg.d_static_in}")
    return dc.gelu(dc.affine(x, p["static.w"], p["static.b"]))


def encode_state(x_std, b, p: ModelParams,
                 drop_rng: np.random.Generator | None = None) -> dc.Tensor:
    """Latent code for one period given standardised state and static embedding."""
    x_std = _as_tensor(x_std)
    b = _as_tensor(b)
    if x_std.cols != p.cfg.d_x:
        raise dc.DiffcoreError(f"state input dim {x_std.cols} != {p.cfg.d_x}")
    return _mlp2(dc.concat_cols([x_std, b]), p, "state", drop_rng)


def encode_action(a_struct, a_comm, p: ModelParams,
                  drop_rng: np.random.Generator | None = None) -> dc.Tensor:
    """Action embedding over the full [structured; communication] vector.

    The wide variant is one feed-forward block over the concatenation; the
    split variant encodes the two halves separately and projects their
    concatenated features. Interfaces are identical.
    """
    a_struct = _as_tensor(a_struct)
    a_comm = _as_tensor(a_comm)
    cfg = p.cfg
    if a_struct.cols != cfg.d_a_struct or a_comm.cols != cfg.d_a_comm:
        raise dc.DiffcoreError(
            f"action dims ({a_struct.cols},{a_comm.cols}) != ({cfg.d_a_struct},{cfg.d_a_comm})"
        )
    if cfg.action_encoder == "wide":
        return _mlp2(dc.concat_cols([a_struct, a_comm]), p, "action", drop_rng)
    hs = dc.gelu(dc.affine(a_struct, p["action.struct_w1"], p["action.struct_b1"]))
    hc = dc.gelu(dc.affine(a_comm, p["action.comm_w1"], p["action.comm_b1"]))
    h = _maybe_dropout(dc.concat_cols([hs, hc]), cfg.dropout, drop_rng)
    return dc.affine(h, p["action.proj_w"], p["action.proj_b"])


def initial_hidden(p: ModelParams, batch: int = 1) -> dc.Tensor:
    return dc.constant(np.zeros((batch, p.cfg.d_h)))


def transition(h_prev, z, u, p: ModelParams) -> dc.Tensor:
    """One recurrent update of the hidden state on [z; u]."""
    h_prev = _as_tensor(h_prev)
    zu = dc.concat_cols([_as_tensor(z), _as_tensor(u)])
    return dc.gru_step(h_prev, zu, p.gru_weights())


def predict_head(h, b, tau_std, p: ModelParams,
                 drop_rng: np.random.Generator | None = None) -> tuple[dc.Tensor, dc.Tensor]:
    """Per-output heads over [h; b; tau of the period being predicted].

    Returns (standardised target estimate (rows,1), next-latent estimate
    (rows,d_z)). tau_std must belong to the NEXT period, the one the
    estimates describe, not the period last consumed.
    """
    tau_std = _as_tensor(tau_std)
    if tau_std.cols != p.cfg.d_tau:
        raise dc.DiffcoreError(f"tau dim {tau_std.cols} != {p.cfg.d_tau}")
    inp = dc.concat_cols([_as_tensor(h), _as_tensor(b), tau_std])
    y_hat = _mlp2(inp, p, "head_y", drop_rng)
    z_hat = _mlp2(inp, p, "head_z", drop_rng)
    return y_hat, z_hat


# ---------------------------------------------------------------------------
# checkpoint container


@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: ModelParams
    norm_stats: dict[str, np.ndarray]
    loss_weights: dict[str, float]
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, params: ModelParams, norm_stats: Mapping[str, np.ndarray],
                    loss_weights: Mapping[str, float], meta: Mapping | None = None) -> None:
    """Single-file npz checkpoint.

    Written byte-deterministically (sorted entries, fixed zip timestamps) so
    identical state produces identical files; float64 arrays round-trip
    bit-exactly through numpy's array format.
    """
    header = {
        "version": CHECKPOINT_VERSION,
        "config": params.cfg.to_dict(),
        "loss_weights": dict(loss_weights),
        "meta": dict(meta or {}),
        "param_names": params.names(),
        "norm_names": sorted(norm_stats),
    }
    arrays = {f"param/{k}": t.value for k, t in params.tensors.items()}
    arrays.update({f"norm/{k}": np.asarray(v, dtype=np.float64) for k, v in norm_stats.items()})
    arrays["header"] = np.array(json.dumps(header, sort_keys=True))
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED, allowZip64=True) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            npformat.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(np.asarray(data["header"]).reshape(-1)[0]))
        if header["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        cfg = ModelConfig.from_dict(header["config"])
        tensors = {
            name: dc.parameter(np.array(data[f"param/{name}"]), name=name)
            for name in header["param_names"]
        }
        norm_stats = {name: np.array(data[f"norm/{name}"]) for name in header["norm_names"]}
    expected = set(_param_shapes(cfg))
    if set(tensors) != expected:
        raise ValueError("checkpoint parameter names do not match the config")
    return Checkpoint(
        cfg=cfg,
        params=ModelParams(cfg, tensors),
        norm_stats=norm_stats,
        loss_weights=header["loss_weights"],
        meta=header["meta"],
    )
