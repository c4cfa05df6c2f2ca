"""Returns-conditioned causal transformer policy with a Gaussian action head.

Each timestep contributes four tokens in order (reward-to-go, cost-to-go,
state, action); all four share one learned timestep embedding. Action
distributions are read from the state-token positions through a causally
masked pre-norm attention stack. The stochastic head emits a tanh-squashed
mean scaled to the action bound and a state-dependent clamped log-std; the
density and its closed-form entropy are taken in the unsquashed space, with
clamping applied at sampling time instead of a change-of-variables term.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import nn
from .nn import Tensor

LOG_2PI = math.log(2.0 * math.pi)

HEAD_MODES = ("gaussian", "deterministic")

# The scripted collectors clip accelerations, so a large share of dataset
# actions sit exactly on the bound; squashing to the exact bound would need
# infinite pre-activations to fit them. The mean head therefore squashes to
# a slightly wider range and predictions are clipped back to the bound.
MEAN_HEADROOM = 1.2


@dataclass(frozen=True)
class CdtConfig:
    state_dim: int
    action_dim: int
    n_layers: int = 2
    n_heads: int = 4
    embed_dim: int = 64
    context_len: int = 10
    dropout: float = 0.1
    max_episode_len: int = 512
    head_mode: str = "gaussian"
    log_std_bounds: tuple[float, float] = (-5.0, 2.0)
    action_bound: float = 1.0

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.context_len < 1:
            raise ValueError("context_len must be at least 1")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.log_std_bounds[0] >= self.log_std_bounds[1]:
            raise ValueError("log_std_bounds must be (low, high) with low < high")
        if min(self.state_dim, self.action_dim, self.n_layers, self.n_heads,
               self.max_episode_len) < 1:
            raise ValueError("dimensions and depths must be positive")


PRESETS = {
    "desk": dict(n_layers=2, n_heads=4, embed_dim=64, context_len=10),
    "paper": dict(n_layers=3, n_heads=8, embed_dim=128, context_len=10),
}


def preset(name: str, state_dim: int, action_dim: int, **overrides) -> CdtConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kwargs = dict(PRESETS[name])
    kwargs.update(overrides)
    return CdtConfig(state_dim=state_dim, action_dim=action_dim, **kwargs)


@dataclass(frozen=True)
class TokenWindow:
    """A context window of K timesteps, left-padded at episode starts.

    Padded positions are flagged invalid and carry zeros; timesteps are the
    global step indices and must strictly increase over the valid span.
    """

    rtg_reward: np.ndarray
    rtg_cost: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    timesteps: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "rtg_reward", np.asarray(self.rtg_reward, dtype=np.float64))
        set_(self, "rtg_cost", np.asarray(self.rtg_cost, dtype=np.float64))
        set_(self, "states", np.asarray(self.states, dtype=np.float64))
        set_(self, "actions", np.asarray(self.actions, dtype=np.float64))
        set_(self, "timesteps", np.asarray(self.timesteps, dtype=np.int64))
        set_(self, "valid_mask", np.asarray(self.valid_mask, dtype=bool))
        k = self.rtg_reward.shape[0]
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("states and actions must be 2-d (K, dim)")
        for name in ("rtg_cost", "states", "actions", "timesteps", "valid_mask"):
            if getattr(self, name).shape[0] != k:
                raise ValueError(f"window field {name} does not have length {k}")
        if not self.valid_mask.any():
            raise ValueError("window must contain at least one valid position")
        ts = self.timesteps[self.valid_mask]
        if ts.size > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError("timesteps must strictly increase over valid positions")
        if np.any(ts < 0):
            raise ValueError("timesteps must be non-negative")
        pad = ~self.valid_mask
        if pad.any():
            first_valid = int(np.argmax(self.valid_mask))
            if not np.all(self.valid_mask[first_valid:]):
                raise ValueError("padding must form a left prefix of the window")
            for name in ("rtg_reward", "rtg_cost", "states", "actions", "timesteps"):
                if np.any(np.asarray(getattr(self, name))[pad] != 0):
                    raise ValueError(f"padded positions of {name} must be zero")

    @property
    def context_len(self) -> int:
        return self.rtg_reward.shape[0]

    @property
    def last_valid(self) -> int:
        return int(np.nonzero(self.valid_mask)[0][-1])

    @classmethod
    def from_steps(cls, context_len: int, rtg_reward, rtg_cost, states, actions,
                   timesteps) -> "TokenWindow":
        """Left-pad per-step arrays (length v <= K) into a window of size K."""
        rtg_reward = np.asarray(rtg_reward, dtype=np.float64)
        v = rtg_reward.shape[0]
        if not 1 <= v <= context_len:
            raise ValueError(f"need 1..{context_len} steps, got {v}")
        states = np.asarray(states, dtype=np.float64)
        actions = np.asarray(actions, dtype=np.float64)
        pad = context_len - v

        def pad_arr(a):
            a = np.asarray(a)
            width = [(pad, 0)] + [(0, 0)] * (a.ndim - 1)
            return np.pad(a, width)

        return cls(
            rtg_reward=pad_arr(rtg_reward),
            rtg_cost=pad_arr(np.asarray(rtg_cost, dtype=np.float64)),
            states=pad_arr(states),
            actions=pad_arr(actions),
            timesteps=pad_arr(np.asarray(timesteps, dtype=np.int64)),
            valid_mask=np.concatenate([np.zeros(pad, dtype=bool),
                                       np.ones(v, dtype=bool)]),
        )


@dataclass(frozen=True)
class GaussianAction:
    """Per-position diagonal-Gaussian action parameters (log_std absent in
    deterministic mode)."""

    mean: np.ndarray
    log_std: np.ndarray | None


def init_params(cfg: CdtConfig, rng: np.random.Generator,
                init_scale: float = 0.02) -> dict[str, Tensor]:
    d = cfg.embed_dim

    def w(shape):
        return Tensor(rng.normal(0.0, init_scale, shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True)

    params: dict[str, Tensor] = {
        "embed.rtg_r.w": w((1, d)), "embed.rtg_r.b": zeros(d),
        "embed.rtg_c.w": w((1, d)), "embed.rtg_c.b": zeros(d),
        "embed.state.w": w((cfg.state_dim, d)), "embed.state.b": zeros(d),
        "embed.action.w": w((cfg.action_dim, d)), "embed.action.b": zeros(d),
        "embed.time": w((cfg.max_episode_len, d)),
        "embed.ln.g": ones(d), "embed.ln.b": zeros(d),
        "final_ln.g": ones(d), "final_ln.b": zeros(d),
        "head.mean.w": w((d, cfg.action_dim)), "head.mean.b": zeros(cfg.action_dim),
    }
    for i in range(cfg.n_layers):
        params.update({
            f"block{i}.ln1.g": ones(d), f"block{i}.ln1.b": zeros(d),
            f"block{i}.attn.w_qkv": w((d, 3 * d)), f"block{i}.attn.b_qkv": zeros(3 * d),
            f"block{i}.attn.w_out": w((d, d)), f"block{i}.attn.b_out": zeros(d),
            f"block{i}.ln2.g": ones(d), f"block{i}.ln2.b": zeros(d),
            f"block{i}.mlp.w_fc": w((d, 4 * d)), f"block{i}.mlp.b_fc": zeros(4 * d),
            f"block{i}.mlp.w_out": w((4 * d, d)), f"block{i}.mlp.b_out": zeros(d),
        })
    if cfg.head_mode == "gaussian":
        params["head.log_std.w"] = w((d, cfg.action_dim))
        params["head.log_std.b"] = zeros(cfg.action_dim)
    return params


def _batch_arrays(windows: list[TokenWindow], cfg: CdtConfig) -> dict[str, np.ndarray]:
    for wdw in windows:
        if wdw.context_len != cfg.context_len:
            raise ValueError(
                f"window length {wdw.context_len} does not match config "
                f"context_len {cfg.context_len}"
            )
        if wdw.states.shape[1] != cfg.state_dim or wdw.actions.shape[1] != cfg.action_dim:
            raise nn.ShapeError(
                f"window dims (state {wdw.states.shape[1]}, action "
                f"{wdw.actions.shape[1]}) do not match config "
                f"({cfg.state_dim}, {cfg.action_dim})"
            )
    return {
        "rtg_r": np.stack([w.rtg_reward for w in windows]),
        "rtg_c": np.stack([w.rtg_cost for w in windows]),
        "states": np.stack([w.states for w in windows]),
        "actions": np.stack([w.actions for w in windows]),
        "timesteps": np.stack([w.timesteps for w in windows]),
        "valid": np.stack([w.valid_mask for w in windows]),
    }


def _embed_tokens(arrs: dict[str, np.ndarray], cfg: CdtConfig,
                  params: dict[str, Tensor]) -> Tensor:
    """Raw interleaved token embeddings, shape (B, 4K, D)."""
    ts = arrs["timesteps"]
    if ts.max() >= cfg.max_episode_len:
        raise ValueError(
            f"timestep {int(ts.max())} exceeds max_episode_len {cfg.max_episode_len}"
        )
    b, k = ts.shape
    d = cfg.embed_dim

    time_emb = nn.embedding_lookup(params["embed.time"], ts)  # (B,K,D)

    def lin(x: np.ndarray, name: str) -> Tensor:
        h = nn.matmul(Tensor(x), params[f"embed.{name}.w"])
        return h + params[f"embed.{name}.b"] + time_emb

    def lin_scalar(x: np.ndarray, name: str) -> Tensor:
        # (B,K,1) x (1,D) is a rank-1 product; broadcasting beats dgemm here
        h = nn.mul(Tensor(x[..., None]), params[f"embed.{name}.w"])
        return h + params[f"embed.{name}.b"] + time_emb

    e_r = lin_scalar(arrs["rtg_r"], "rtg_r")
    e_c = lin_scalar(arrs["rtg_c"], "rtg_c")
    e_s = lin(arrs["states"], "state")
    e_a = lin(arrs["actions"], "action")

    tokens = nn.stack([e_r, e_c, e_s, e_a], axis=2)  # (B,K,4,D)
    return nn.reshape(tokens, (b, 4 * k, d))


def tokenize(window: TokenWindow, cfg: CdtConfig,
             params: dict[str, Tensor]) -> Tensor:
    """Embedded token sequence for one window, shape (4K, embed_dim)."""
    arrs = _batch_arrays([window], cfg)
    return _embed_tokens(arrs, cfg, params)[0]


_MASK_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _mask_parts(s: int) -> tuple[np.ndarray, np.ndarray]:
    parts = _MASK_CACHE.get(s)
    if parts is None:
        causal = np.tril(np.ones((s, s), dtype=bool))
        eye = np.eye(s, dtype=bool)
        parts = (causal, eye)
        _MASK_CACHE[s] = parts
    return parts


def _mask_allow(valid: np.ndarray) -> np.ndarray:
    """Boolean attention mask (B or 1, S, S): True where a query may attend.

    Allowed pairs are causal with a valid key; the diagonal stays allowed so
    padded query rows still normalize. Fully-valid batches share one cached
    causal mask.
    """
    b, k = valid.shape
    s = 4 * k
    causal, eye = _mask_parts(s)
    if valid.all():
        return causal[None, :, :]  # broadcast over the batch
    token_valid = np.repeat(valid, 4, axis=1)  # (B,S)
    allow = causal[None, :, :] & token_valid[:, None, :]
    allow |= eye[None, :, :]
    return allow


def _attention(x: Tensor, allow: np.ndarray, cfg: CdtConfig,
               params: dict[str, Tensor], idx: int, train: bool,
               rng) -> Tensor:
    b, s, d = x.shape
    h = cfg.n_heads
    dh = d // h
    qkv = nn.matmul(x, params[f"block{idx}.attn.w_qkv"]) + params[f"block{idx}.attn.b_qkv"]
    qkv = nn.reshape(qkv, (b, s, 3, h, dh))
    qkv = nn.transpose(qkv, (2, 0, 3, 1, 4))  # (3,B,H,S,dh)
    q, k_, v = qkv[0], qkv[1], qkv[2]
    att = nn.matmul(q, nn.transpose(k_, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    att = nn.masked_softmax_last(att, allow)
    att = nn.dropout(att, cfg.dropout, train, rng)
    ctx = nn.matmul(att, v)  # (B,H,S,dh)
    ctx = nn.reshape(nn.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
    out = nn.matmul(ctx, params[f"block{idx}.attn.w_out"]) + params[f"block{idx}.attn.b_out"]
    return nn.dropout(out, cfg.dropout, train, rng)


def _mlp(x: Tensor, cfg: CdtConfig, params: dict[str, Tensor], idx: int,
         train: bool, rng) -> Tensor:
    h = nn.matmul(x, params[f"block{idx}.mlp.w_fc"]) + params[f"block{idx}.mlp.b_fc"]
    h = nn.gelu(h)
    h = nn.matmul(h, params[f"block{idx}.mlp.w_out"]) + params[f"block{idx}.mlp.b_out"]
    return nn.dropout(h, cfg.dropout, train, rng)


def _forward_tensors(arrs: dict[str, np.ndarray], cfg: CdtConfig,
                     params: dict[str, Tensor], train: bool,
                     rng) -> tuple[Tensor, Tensor | None]:
    """Run the stack; returns (mean, log_std) tensors of shape (B, K, A)."""
    x = _embed_tokens(arrs, cfg, params)
    x = nn.layer_norm(x, params["embed.ln.g"], params["embed.ln.b"])
    x = nn.dropout(x, cfg.dropout, train, rng)
    allow = _mask_allow(arrs["valid"])
    for i in range(cfg.n_layers):
        attn_in = nn.layer_norm(x, params[f"block{i}.ln1.g"], params[f"block{i}.ln1.b"])
        x = x + _attention(attn_in, allow, cfg, params, i, train, rng)
        mlp_in = nn.layer_norm(x, params[f"block{i}.ln2.g"], params[f"block{i}.ln2.b"])
        x = x + _mlp(mlp_in, cfg, params, i, train, rng)
    x = nn.layer_norm(x, params["final_ln.g"], params["final_ln.b"])

    state_positions = x[:, 2::4, :]  # (B,K,D): predictions read from s tokens
    mean = nn.matmul(state_positions, params["head.mean.w"]) + params["head.mean.b"]
    mean = nn.tanh(mean) * (cfg.action_bound * MEAN_HEADROOM)
    if cfg.head_mode != "gaussian":
        return mean, None
    log_std = nn.matmul(state_positions, params["head.log_std.w"]) + params["head.log_std.b"]
    log_std = nn.clip(log_std, *cfg.log_std_bounds)
    return mean, log_std


def forward(window: TokenWindow, cfg: CdtConfig, params: dict[str, Tensor],
            train: bool = False, rng: np.random.Generator | None = None
            ) -> GaussianAction:
    """Action distribution parameters per timestep for one window."""
    arrs = _batch_arrays([window], cfg)
    mean, log_std = _forward_tensors(arrs, cfg, params, train, rng)
    return GaussianAction(
        mean=mean.data[0],
        log_std=None if log_std is None else log_std.data[0],
    )


def gaussian_nll(mean: Tensor, log_std: Tensor, actions: np.ndarray) -> Tensor:
    """Per-position negative log density, summed over action dims: (..., K)."""
    z = (Tensor(actions) - mean) * nn.exp(-log_std)
    elem = nn.pow_const(z, 2.0) * 0.5 + log_std + 0.5 * LOG_2PI
    return nn.sum_(elem, axis=-1)


def gaussian_entropy(log_std: Tensor) -> Tensor:
    """Closed-form diagonal-Gaussian entropy per position: (..., K)."""
    action_dim = log_std.shape[-1]
    return nn.sum_(log_std, axis=-1) + action_dim * 0.5 * (1.0 + LOG_2PI)


def loss(batch: list[tuple[TokenWindow, np.ndarray]], cfg: CdtConfig,
         params: dict[str, Tensor], lambda_ent: float = 0.0,
         train: bool = True, rng: np.random.Generator | None = None
         ) -> tuple[Tensor, dict[str, float]]:
    """Mean loss over valid positions of a batch.

    Gaussian head: negative log-likelihood minus lambda_ent times the policy
    entropy. Deterministic head: mean squared action error (lambda_ent is
    ignored and reported entropy is zero).
    """
    if not batch:
        raise ValueError("empty batch")
    windows = [w for w, _ in batch]
    actions = np.stack([np.asarray(a, dtype=np.float64) for _, a in batch])
    arrs = _batch_arrays(windows, cfg)
    return loss_from_arrays(arrs, actions, cfg, params, lambda_ent, train, rng)


def loss_sums_from_arrays(arrs: dict[str, np.ndarray], actions: np.ndarray,
                          cfg: CdtConfig, params: dict[str, Tensor],
                          lambda_ent: float = 0.0, train: bool = True,
                          rng: np.random.Generator | None = None
                          ) -> tuple[Tensor, float, float, float]:
    """Unnormalized loss over valid positions: (sum tensor, n_valid,
    nll_sum, ent_sum). Dividing grads by n_valid (times action_dim for the
    deterministic head) recovers the mean-loss gradient, which lets
    data-parallel workers combine partial sums exactly."""
    if lambda_ent < 0:
        raise ValueError("lambda_ent must be non-negative")
    mean, log_std = _forward_tensors(arrs, cfg, params, train, rng)
    mask = arrs["valid"].astype(np.float64)
    n_valid = float(mask.sum())

    if cfg.head_mode == "gaussian":
        nll_sum = nn.sum_(gaussian_nll(mean, log_std, actions) * mask)
        ent_sum = nn.sum_(gaussian_entropy(log_std) * mask)
        total = nll_sum - lambda_ent * ent_sum
        return total, n_valid, nll_sum.item(), ent_sum.item()

    err = Tensor(actions) - mean
    sq_sum = nn.sum_(nn.sum_(nn.pow_const(err, 2.0), axis=-1) * mask)
    return sq_sum, n_valid, sq_sum.item(), 0.0


def loss_from_arrays(arrs: dict[str, np.ndarray], actions: np.ndarray,
                     cfg: CdtConfig, params: dict[str, Tensor],
                     lambda_ent: float = 0.0, train: bool = True,
                     rng: np.random.Generator | None = None
                     ) -> tuple[Tensor, dict[str, float]]:
    """Loss on pre-batched window arrays (the hot path used by training)."""
    total_sum, n_valid, nll_sum, ent_sum = loss_sums_from_arrays(
        arrs, actions, cfg, params, lambda_ent, train, rng)
    if cfg.head_mode == "gaussian":
        inv = 1.0 / n_valid
        total = total_sum * inv
        stats = {"nll": nll_sum * inv, "entropy": ent_sum * inv,
                 "total": total.item()}
        return total, stats
    mse = total_sum * (1.0 / (n_valid * cfg.action_dim))
    stats = {"nll": mse.item(), "entropy": 0.0, "total": mse.item()}
    return mse, stats


def predict(window: TokenWindow, cfg: CdtConfig, params: dict[str, Tensor],
            mode: str = "mean", rng: np.random.Generator | None = None
            ) -> np.ndarray:
    """Action at the window's last valid position.

    mode="mean" returns the distribution mean; mode="sample" draws a
    reparameterized sample clamped to the action bounds.
    """
    if mode not in ("mean", "sample"):
        raise ValueError("mode must be 'mean' or 'sample'")
    ga = forward(window, cfg, params, train=False)
    last = window.last_valid
    action = ga.mean[last].copy()
    if mode == "sample" and ga.log_std is not None:
        if rng is None:
            raise ValueError("mode='sample' needs an rng")
        std = np.exp(ga.log_std[last])
        action = action + std * rng.standard_normal(action.shape)
    return np.clip(action, -cfg.action_bound, cfg.action_bound)


@dataclass
class CdtModel:
    """Architecture config plus named parameter tensors."""

    config: CdtConfig
    params: dict[str, Tensor]

    @classmethod
    def init(cls, cfg: CdtConfig, rng: np.random.Generator) -> "CdtModel":
        return cls(config=cfg, params=init_params(cfg, rng))

    def forward(self, window: TokenWindow, train: bool = False,
                rng: np.random.Generator | None = None) -> GaussianAction:
        return forward(window, self.config, self.params, train, rng)

    def predict(self, window: TokenWindow, mode: str = "mean",
                rng: np.random.Generator | None = None) -> np.ndarray:
        return predict(window, self.config, self.params, mode, rng)

    def save(self, path, extra: dict | None = None) -> None:
        header = {"model": asdict(self.config), "extra": extra or {}}
        arrays = {name: p.data for name, p in self.params.items()}
        nn.save_checkpoint(path, header, arrays)

    @classmethod
    def load(cls, path) -> tuple["CdtModel", dict]:
        header, arrays = nn.load_checkpoint(path)
        raw = dict(header["model"])
        raw["log_std_bounds"] = tuple(raw["log_std_bounds"])
        cfg = CdtConfig(**raw)
        params = {name: Tensor(arr, requires_grad=True)
                  for name, arr in arrays.items()}
        return cls(config=cfg, params=params), header.get("extra", {})

    def replace_config(self, **kwargs) -> "CdtModel":
        return CdtModel(config=replace(self.config, **kwargs), params=self.params)
