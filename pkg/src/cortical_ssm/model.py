"""Frequency-SSM and Channel-SSM branches, their blocks, and the fusion head.

Internal layout keeps time second-to-last and the mixed variable last:
the front-end produces X~ as [B, M, T, F], the Frequency-SSM branch works on
[B, F, T, M] (slices are frequency rows, variables are electrodes) and the
Channel-SSM branch on [B, M, T, F]. Public single-sample helpers take and
return the [M, F, T] layout.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tape
from .s5 import SSM_KEYS, init_s5_params, ssm_op
from .signal_io import ConfigurationError, SignalTensor, make_rng
from .tape import Tensor
from .wavelet_conv import (BRANCH_WEIGHTS, FrontEndConfig, build_morlet_filterbank, conv1d_op,
                           conv_kernel_length, fixed_features)


@dataclass
class ModelConfig:
    M: int
    T: int
    N: int
    fs: float = 250.0
    L: int = 2
    Q: int = 64
    enable_wavelet_conv: bool = True
    enable_frequency_ssm: bool = True
    enable_channel_ssm: bool = True
    front_end: FrontEndConfig = field(default_factory=FrontEndConfig)
    ffn_expansion: int = 2
    head_hidden: int = 256
    ln_eps: float = 1e-5

    @property
    def F(self) -> int:
        return self.front_end.F

    @property
    def kernel_length(self) -> int:
        return conv_kernel_length(self.fs)

    def validate(self) -> None:
        if self.M < 1 or self.T < 2 or self.N < 2:
            raise ConfigurationError("need M >= 1, T >= 2 and N >= 2")
        if self.L < 1 or self.Q < 2 or self.Q % 2:
            raise ConfigurationError("need L >= 1 and an even Q >= 2")
        if not (self.enable_wavelet_conv or self.enable_frequency_ssm or self.enable_channel_ssm):
            raise ConfigurationError("at least one module must be enabled")
        if self.enable_wavelet_conv:
            self.front_end.validate()
            if self.front_end.a_branch == "conv1d" and self.kernel_length > self.T:
                raise ConfigurationError(f"conv kernel length {self.kernel_length} exceeds T={self.T}")
            if self.front_end.e_branch == "cwt" and self.front_end.f_max > self.fs / 2:
                raise ConfigurationError("f_max beyond Nyquist")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        fe = d.pop("front_end", {}) or {}
        fe_known = {f.name for f in dataclasses.fields(FrontEndConfig)}
        if set(fe) - fe_known:
            raise ConfigurationError(f"unknown front_end keys: {sorted(set(fe) - fe_known)}")
        return cls(front_end=FrontEndConfig(**fe), **d)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_json(cls, path: str | Path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _gauss(rng, shape, fan_in):
    return rng.standard_normal(shape) / np.sqrt(fan_in)


def _block_params(prefix: str, P: int, cfg: ModelConfig, rng, seed: int) -> dict[str, np.ndarray]:
    H = cfg.ffn_expansion * P
    out = {f"{prefix}.ln_gamma": np.ones(P), f"{prefix}.ln_beta": np.zeros(P)}
    for k, v in init_s5_params(cfg.Q, P, seed).to_flat().items():
        out[f"{prefix}.ssm.{k}"] = v
    out[f"{prefix}.ffn.w1"] = _gauss(rng, (P, H), P)
    out[f"{prefix}.ffn.b1"] = np.zeros(H)
    out[f"{prefix}.ffn.w2"] = _gauss(rng, (H, P), H)
    out[f"{prefix}.ffn.b2"] = np.zeros(P)
    return out


def head_input_width(cfg: ModelConfig) -> int:
    n = int(cfg.enable_frequency_ssm) + int(cfg.enable_channel_ssm)
    return cfg.M * cfg.F * max(n, 1)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """All trainable arrays (float64) for the enabled modules, keyed by dotted name."""
    rng = make_rng(seed)
    F, M = cfg.F, cfg.M
    p: dict[str, np.ndarray] = {}
    if cfg.enable_wavelet_conv:
        fe = cfg.front_end
        if fe.e_branch != "none":
            p["front.ln_e_gamma"] = np.ones(F)
            p["front.ln_e_beta"] = np.zeros(F)
        if fe.a_branch == "conv1d":
            K = cfg.kernel_length
            p["front.conv"] = _gauss(rng, (F, K), K)
            p["front.ln_a_gamma"] = np.ones(F)
            p["front.ln_a_beta"] = np.zeros(F)
    else:
        p["lift.gamma"] = 1.0 + 0.5 * rng.standard_normal(F)
        p["lift.beta"] = 0.5 * rng.standard_normal(F)
    for branch, enabled, P in (("freq", cfg.enable_frequency_ssm, M), ("chan", cfg.enable_channel_ssm, F)):
        if enabled:
            for i in range(cfg.L):
                p.update(_block_params(f"{branch}.{i}", P, cfg, rng, seed=int(rng.integers(2 ** 32))))
    D, H = head_input_width(cfg), cfg.head_hidden
    p["head.w1"] = _gauss(rng, (D, H), D)
    p["head.b1"] = np.zeros(H)
    p["head.w2"] = _gauss(rng, (H, cfg.N), H)
    p["head.b2"] = np.zeros(cfg.N)
    return p


def count_parameters(params: dict[str, np.ndarray]) -> int:
    """Trainable scalars; complex quantities are stored as re/im pairs so count twice."""
    return int(sum(v.size for v in params.values()))


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = True, dtype=None) -> dict[str, Tensor]:
    return {k: Tensor(v if dtype is None else v.astype(dtype), requires_grad=requires_grad)
            for k, v in params.items()}


def block_op(x: Tensor, t: dict[str, Tensor], prefix: str, eps: float) -> Tensor:
    """One block on x[..., T, P]: z = LN(x); return FFN(SSM(z)) + z."""
    z = tape.layernorm_time(x, t[f"{prefix}.ln_gamma"], t[f"{prefix}.ln_beta"], eps)
    s = ssm_op(z, *(t[f"{prefix}.ssm.{k}"] for k in SSM_KEYS))
    h = tape.gelu(tape.linear(s, t[f"{prefix}.ffn.w1"], t[f"{prefix}.ffn.b1"]))
    return tape.add(tape.linear(h, t[f"{prefix}.ffn.w2"], t[f"{prefix}.ffn.b2"]), z)


def front_end_op(cfg: ModelConfig, t: dict[str, Tensor], x: np.ndarray,
                 fixed: np.ndarray | None = None) -> Tensor:
    """x[B, M, T] -> X~ as [B, M, T, F]. ``fixed`` may carry cached E-branch features."""
    dtype = t["head.w1"].data.dtype
    if not cfg.enable_wavelet_conv:
        rep = Tensor(np.repeat(x[..., None], cfg.F, axis=-1).astype(dtype))
        return tape.layernorm_time(rep, t["lift.gamma"], t["lift.beta"], cfg.ln_eps)
    fe = cfg.front_end
    parts = []
    if fe.e_branch != "none":
        if fixed is None:
            fixed = fixed_features(x, fe, cfg.fs)
        parts.append(tape.layernorm_time(Tensor(fixed.astype(dtype)), t["front.ln_e_gamma"],
                                         t["front.ln_e_beta"], cfg.ln_eps))
    if fe.a_branch == "conv1d":
        conv = conv1d_op(Tensor(x.astype(dtype)), t["front.conv"])
        parts.append(tape.layernorm_time(conv, t["front.ln_a_gamma"], t["front.ln_a_beta"], cfg.ln_eps))
    if len(parts) == 1:
        return parts[0]
    return tape.add(tape.scale(parts[0], BRANCH_WEIGHTS[0]), tape.scale(parts[1], BRANCH_WEIGHTS[1]))


def forward_op(cfg: ModelConfig, t: dict[str, Tensor], x: np.ndarray,
               fixed: np.ndarray | None = None) -> dict[str, Tensor]:
    """Batched forward on x[B, M, T]. Returns logits plus the branch features U, V and X~."""
    if x.ndim != 3 or x.shape[1] != cfg.M:
        raise ConfigurationError(f"expected input [B, {cfg.M}, T], got {x.shape}")
    xt = front_end_op(cfg, t, x, fixed)
    out = {"x_tilde": xt}
    pooled = []
    if cfg.enable_frequency_ssm:
        u = tape.transpose(xt, (0, 3, 2, 1))  # [B, F, T, M]
        for i in range(cfg.L):
            u = block_op(u, t, f"freq.{i}", cfg.ln_eps)
        out["U"] = u
        pooled.append(tape.transpose(tape.mean_time(u), (0, 2, 1)))  # [B, M, F]
    if cfg.enable_channel_ssm:
        v = xt  # [B, M, T, F]
        for i in range(cfg.L):
            v = block_op(v, t, f"chan.{i}", cfg.ln_eps)
        out["V"] = v
        pooled.append(tape.mean_time(v))  # [B, M, F]
    if not pooled:
        pooled.append(tape.mean_time(xt))
    B = x.shape[0]
    flat = [tape.reshape(p, (B, cfg.M * cfg.F)) for p in pooled]
    feats = flat[0] if len(flat) == 1 else tape.concat(flat, axis=-1)
    h = tape.gelu(tape.linear(feats, t["head.w1"], t["head.b1"]))
    out["logits"] = tape.linear(h, t["head.w2"], t["head.b2"])
    return out


def predict_proba(cfg: ModelConfig, params: dict[str, np.ndarray], x: np.ndarray,
                  fixed: np.ndarray | None = None, batch_size: int = 32, dtype=np.float64) -> np.ndarray:
    """Class probabilities for x[n, M, T], evaluated in batches without recording gradients."""
    t = as_tensors(params, requires_grad=False, dtype=dtype)
    out = []
    for s in range(0, len(x), batch_size):
        f = None if fixed is None else fixed[s:s + batch_size]
        logits = forward_op(cfg, t, x[s:s + batch_size], f)["logits"].data
        out.append(tape.softmax(logits.astype(np.float64)))
    return np.concatenate(out) if out else np.zeros((0, cfg.N))


# single-sample helpers in the [M, F, T] layout


def _block_params_tensors(p: dict[str, np.ndarray], prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": Tensor(v) for k, v in p.items()}


def frequency_ssm_block(U: np.ndarray, p: dict[str, np.ndarray], eps: float = 1e-5) -> np.ndarray:
    """One Frequency-SSM block on U[M, F, T]; ``p`` uses block-local keys (ln_gamma, ssm.B_re, ffn.w1, ...)."""
    x = Tensor(np.transpose(U, (1, 2, 0)))  # [F, T, M]
    y = block_op(x, _block_params_tensors(p, "b"), "b", eps).data
    return np.transpose(y, (2, 0, 1))


def channel_ssm_block(V: np.ndarray, p: dict[str, np.ndarray], eps: float = 1e-5) -> np.ndarray:
    """One Channel-SSM block on V[M, F, T]."""
    x = Tensor(np.transpose(V, (0, 2, 1)))  # [M, T, F]
    y = block_op(x, _block_params_tensors(p, "b"), "b", eps).data
    return np.transpose(y, (0, 2, 1))


def fusion_head(U: np.ndarray | None, V: np.ndarray | None, head: dict[str, np.ndarray]) -> np.ndarray:
    """Temporal mean of each [M, F, T] map, concatenated, through the head FFN and softmax."""
    pooled = [z.mean(axis=-1).reshape(-1) for z in (U, V) if z is not None]
    feats = np.concatenate(pooled)
    h = tape.gelu(Tensor(feats @ head["w1"] + head["b1"])).data
    return tape.softmax(h @ head["w2"] + head["b2"])


def model_forward(cfg: ModelConfig, params: dict[str, np.ndarray], X: SignalTensor) -> np.ndarray:
    cfg.validate()
    if X.data.shape != (cfg.M, cfg.T) or X.fs != cfg.fs:
        raise ConfigurationError(f"input {X.data.shape} @ {X.fs} Hz does not match config "
                                 f"({cfg.M}, {cfg.T}) @ {cfg.fs} Hz")
    return predict_proba(cfg, params, X.data[None])[0]


def filterbank_for(cfg: ModelConfig):
    fe = cfg.front_end
    return build_morlet_filterbank(fe.F, fe.f_min, fe.f_max, cfg.fs, fe.omega0)
