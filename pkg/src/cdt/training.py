"""Subsequence batch sampling and the gradient-descent training loop.

The loop samples fixed-length windows, takes Adam steps on the clipped
gradient of the policy loss, and optionally splits each batch across worker
processes. Workers share the parameter block read-only through shared memory
and return unnormalized gradient sums, so the combined update is exact and
bit-reproducible for a fixed (seed, worker count).
"""

from __future__ import annotations

import hashlib
import multiprocessing as mp
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from multiprocessing import shared_memory
from pathlib import Path

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    def threadpool_limits(*args, **kwargs):
        return nullcontext()

from . import nn
from .data import TrajectoryDataset
from .model import (CdtConfig, CdtModel, TokenWindow, loss_from_arrays,
                    loss_sums_from_arrays)

ARR_FIELDS = ("rtg_r", "rtg_c", "states", "actions", "timesteps", "valid")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    grad_steps: int = 20_000
    context_len: int = 10
    lambda_ent: float = 0.1
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    clip_norm: float = 0.25
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 0
    workers: int = 1

    def __post_init__(self):
        if min(self.batch_size, self.context_len) < 1 or self.grad_steps < 0:
            raise ValueError("batch_size and context_len must be >= 1, grad_steps >= 0")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


def _sample_batch_arrays(ds: TrajectoryDataset, batch_size: int,
                         context_len: int, rng: np.random.Generator
                         ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Batched window arrays: a trajectory uniformly, then an end index t
    uniformly in [1, T]; the window covers the last min(K, t) steps and is
    left-padded below K. True actions align with the window's action slots."""
    if len(ds) == 0:
        raise ValueError("cannot sample from an empty dataset")
    k = context_len
    state_dim = ds[0].states.shape[1]
    action_dim = ds[0].actions.shape[1]
    rtg_r = np.zeros((batch_size, k))
    rtg_c = np.zeros((batch_size, k))
    states = np.zeros((batch_size, k, state_dim))
    actions = np.zeros((batch_size, k, action_dim))
    timesteps = np.zeros((batch_size, k), dtype=np.int64)
    valid = np.zeros((batch_size, k), dtype=bool)
    for i in range(batch_size):
        traj = ds[int(rng.integers(0, len(ds)))]
        if not traj.has_rtg:
            raise ValueError(
                "trajectory lacks returns-to-go channels; fill them before training"
            )
        end = int(rng.integers(1, len(traj) + 1))
        lo = max(0, end - k)
        offset = k - (end - lo)
        rtg_r[i, offset:] = traj.rtg_reward[lo:end]
        rtg_c[i, offset:] = traj.rtg_cost[lo:end]
        states[i, offset:] = traj.states[lo:end]
        actions[i, offset:] = traj.actions[lo:end]
        timesteps[i, offset:] = np.arange(lo, end)
        valid[i, offset:] = True
    arrs = {"rtg_r": rtg_r, "rtg_c": rtg_c, "states": states,
            "actions": actions, "timesteps": timesteps, "valid": valid}
    return arrs, actions


def sample_batch(ds: TrajectoryDataset, batch_size: int, context_len: int,
                 rng: np.random.Generator) -> list[tuple[TokenWindow, np.ndarray]]:
    """Uniformly sampled subsequence windows with aligned true actions."""
    arrs, actions = _sample_batch_arrays(ds, batch_size, context_len, rng)
    batch = []
    for i in range(batch_size):
        window = TokenWindow(
            rtg_reward=arrs["rtg_r"][i], rtg_cost=arrs["rtg_c"][i],
            states=arrs["states"][i], actions=arrs["actions"][i],
            timesteps=arrs["timesteps"][i], valid_mask=arrs["valid"][i],
        )
        batch.append((window, actions[i]))
    return batch


def _batch_fingerprint(arrs: dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    digest.update(arrs["timesteps"].tobytes())
    digest.update(arrs["states"].tobytes())
    digest.update(arrs["actions"].tobytes())
    return digest.hexdigest()[:16]


@dataclass
class TrainResult:
    model: CdtModel
    trace: list[tuple[int, float, float, float]] = field(default_factory=list)

    def trace_csv(self) -> str:
        lines = ["step,nll,entropy,total"]
        lines += [f"{s},{n!r},{e!r},{t!r}" for s, n, e, t in self.trace]
        return "\n".join(lines) + "\n"


def _param_layout(params: dict[str, nn.Tensor]) -> list[tuple[str, tuple[int, ...], int]]:
    layout = []
    offset = 0
    for name in sorted(params):
        shape = params[name].shape
        layout.append((name, shape, offset))
        offset += int(np.prod(shape)) if shape else 1
    return layout


def _layout_size(layout) -> int:
    name, shape, offset = layout[-1]
    return offset + (int(np.prod(shape)) if shape else 1)


def _views(buf: np.ndarray, layout) -> dict[str, np.ndarray]:
    out = {}
    for name, shape, offset in layout:
        count = int(np.prod(shape)) if shape else 1
        out[name] = buf[offset:offset + count].reshape(shape)
    return out


def _worker_main(worker_id: int, conn, cfg_kwargs: dict, layout,
                 shm_names: dict, half_shape: dict, lambda_ent: float,
                 seed: int) -> None:
    try:
        with threadpool_limits(limits=1, user_api="blas"):
            try:
                import numba
                numba.set_num_threads(1)
            except ImportError:
                pass
            _worker_loop(worker_id, conn, cfg_kwargs, layout, shm_names,
                         half_shape, lambda_ent, seed)
    except Exception as exc:  # pragma: no cover - surfaced in the parent
        conn.send({"kind": "error", "message": f"{type(exc).__name__}: {exc}"})
    finally:
        conn.close()


def _worker_loop(worker_id, conn, cfg_kwargs, layout, shm_names, half_shape,
                 lambda_ent, seed):
    raw = dict(cfg_kwargs)
    raw["log_std_bounds"] = tuple(raw["log_std_bounds"])
    cfg = CdtConfig(**raw)
    shm_params = shared_memory.SharedMemory(name=shm_names["params"])
    shm_grads = shared_memory.SharedMemory(name=shm_names[f"grads{worker_id}"])
    shm_input = shared_memory.SharedMemory(name=shm_names[f"input{worker_id}"])
    n_params = _layout_size(layout)
    param_block = np.ndarray((n_params,), dtype=np.float64, buffer=shm_params.buf)
    grad_block = np.ndarray((n_params,), dtype=np.float64, buffer=shm_grads.buf)
    params = {name: nn.Tensor(view, requires_grad=True)
              for name, view in _views(param_block, layout).items()}
    inputs = _input_views(shm_input.buf, half_shape)
    grad_views = _views(grad_block, layout)
    try:
        while True:
            msg = conn.recv()
            if msg is None:
                return
            step = msg
            rng = np.random.default_rng(
                np.random.SeedSequence([seed, step, worker_id]))
            nn.zero_grads(params)
            arrs = {k: inputs[k] for k in ARR_FIELDS}
            total_sum, n_valid, nll_sum, ent_sum = loss_sums_from_arrays(
                arrs, inputs["actions"], cfg, params, lambda_ent,
                train=True, rng=rng)
            nn.backward(total_sum)
            for name, p in params.items():
                if p.grad is None:
                    grad_views[name][...] = 0.0
                else:
                    grad_views[name][...] = p.grad
            conn.send({"kind": "ok", "n_valid": n_valid,
                       "nll_sum": nll_sum, "ent_sum": ent_sum})
    finally:
        shm_params.close()
        shm_grads.close()
        shm_input.close()


def _input_layout(half: int, k: int, state_dim: int, action_dim: int) -> dict:
    return {
        "rtg_r": ((half, k), np.float64),
        "rtg_c": ((half, k), np.float64),
        "states": ((half, k, state_dim), np.float64),
        "actions": ((half, k, action_dim), np.float64),
        "timesteps": ((half, k), np.int64),
        "valid": ((half, k), np.bool_),
    }


def _input_views(buf, half_shape: dict) -> dict[str, np.ndarray]:
    views = {}
    offset = 0
    for name, (shape, dtype) in half_shape.items():
        nbytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
        views[name] = np.ndarray(shape, dtype=dtype, buffer=buf,
                                 offset=offset)
        offset += nbytes
    return views


class _WorkerPool:
    """Spawned data-parallel workers sharing the parameter block."""

    def __init__(self, model: CdtModel, cfg: TrainConfig, n_workers: int,
                 state_dim: int, action_dim: int):
        self.n_workers = n_workers
        self.layout = _param_layout(model.params)
        n_params = _layout_size(self.layout)
        self.shms = {}
        self.shms["params"] = shared_memory.SharedMemory(
            create=True, size=max(1, n_params * 8))
        self.param_block = np.ndarray((n_params,), dtype=np.float64,
                                      buffer=self.shms["params"].buf)
        # move the live parameters into the shared block
        for name, view in _views(self.param_block, self.layout).items():
            view[...] = model.params[name].data
            model.params[name].data = view

        self.splits = np.array_split(np.arange(cfg.batch_size), n_workers)
        self.half_shapes = []
        self.grad_blocks = []
        self.input_views = []
        cfg_kwargs = asdict(model.config)
        try:
            ctx = mp.get_context("fork")
        except ValueError:  # pragma: no cover - non-POSIX fallback
            ctx = mp.get_context("spawn")
        self.conns = []
        self.procs = []
        for w, split in enumerate(self.splits):
            half_shape = _input_layout(len(split), cfg.context_len,
                                       state_dim, action_dim)
            self.half_shapes.append(half_shape)
            size = sum(int(np.prod(s)) * np.dtype(d).itemsize
                       for s, d in half_shape.values())
            self.shms[f"grads{w}"] = shared_memory.SharedMemory(
                create=True, size=max(1, n_params * 8))
            self.shms[f"input{w}"] = shared_memory.SharedMemory(
                create=True, size=max(1, size))
            self.grad_blocks.append(np.ndarray(
                (n_params,), dtype=np.float64, buffer=self.shms[f"grads{w}"].buf))
            self.input_views.append(
                _input_views(self.shms[f"input{w}"].buf, half_shape))
            parent, child = ctx.Pipe()
            proc = ctx.Process(
                target=_worker_main,
                args=(w, child, cfg_kwargs, self.layout,
                      {k: s.name for k, s in self.shms.items()},
                      half_shape, cfg.lambda_ent, cfg.seed),
                daemon=True,
            )
            proc.start()
            child.close()
            self.conns.append(parent)
            self.procs.append(proc)

    def step(self, step_idx: int, arrs: dict[str, np.ndarray]
             ) -> tuple[np.ndarray, float, float, float]:
        """Dispatch batch halves; returns (grad sum vector, n, nll, ent sums)."""
        for w, split in enumerate(self.splits):
            for name in ARR_FIELDS:
                self.input_views[w][name][...] = arrs[name][split]
        for conn in self.conns:
            conn.send(step_idx)
        n_total = 0.0
        nll_sum = 0.0
        ent_sum = 0.0
        for conn in self.conns:
            res = conn.recv()
            if res["kind"] != "ok":
                raise RuntimeError(f"training worker failed: {res['message']}")
            n_total += res["n_valid"]
            nll_sum += res["nll_sum"]
            ent_sum += res["ent_sum"]
        grad = self.grad_blocks[0].copy()
        for block in self.grad_blocks[1:]:
            grad += block
        return grad, n_total, nll_sum, ent_sum

    def close(self, model: CdtModel) -> None:
        for conn, proc in zip(self.conns, self.procs):
            try:
                conn.send(None)
            except (BrokenPipeError, OSError):
                pass
            conn.close()
            proc.join(timeout=10)
            if proc.is_alive():  # pragma: no cover
                proc.terminate()
        # give the model private copies again before the block disappears
        for name, p in model.params.items():
            p.data = p.data.copy()
        for shm in self.shms.values():
            shm.close()
            shm.unlink()


def train(ds: TrajectoryDataset, model: CdtModel, cfg: TrainConfig, *,
          checkpoint_dir=None, checkpoint_extra: dict | None = None,
          eval_callback=None, log_callback=None) -> TrainResult:
    """Run cfg.grad_steps of loss -> backward -> clip -> Adam on the model.

    Training mutates the model parameters in place and is fully determined by
    (dataset, initial parameters, cfg.seed, cfg.workers). Aborts on a
    non-finite loss.
    """
    mcfg = model.config
    if cfg.context_len != mcfg.context_len:
        raise ValueError(
            f"train context_len {cfg.context_len} does not match model "
            f"context_len {mcfg.context_len}"
        )
    max_t = max((len(t) for t in ds), default=0)
    if max_t > mcfg.max_episode_len:
        raise ValueError(
            f"dataset has trajectories of length {max_t} but the model only "
            f"embeds timesteps below {mcfg.max_episode_len}"
        )

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed))
    adam = nn.adam_init(lr=cfg.lr, betas=cfg.betas)
    result = TrainResult(model=model)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    if cfg.grad_steps == 0:
        return result

    n_workers = min(cfg.workers, cfg.batch_size)
    pool = None
    # at these matrix sizes multithreaded BLAS loses to its own sync cost;
    # workers fork inside the limit so they inherit single-threaded BLAS
    with threadpool_limits(limits=1, user_api="blas"):
        try:
            if n_workers > 1:
                pool = _WorkerPool(model, cfg, n_workers,
                                   state_dim=mcfg.state_dim,
                                   action_dim=mcfg.action_dim)
            _train_loop(ds, model, cfg, rng, adam, result, pool, ckpt_dir,
                        checkpoint_extra, eval_callback, log_callback)
        finally:
            if pool is not None:
                pool.close(model)
    return result


def _train_loop(ds, model, cfg, rng, adam, result, pool, ckpt_dir,
                checkpoint_extra, eval_callback, log_callback) -> None:
    mcfg = model.config
    denom_scale = 1.0 if mcfg.head_mode == "gaussian" else 1.0 / mcfg.action_dim
    for step in range(1, cfg.grad_steps + 1):
        arrs, actions = _sample_batch_arrays(ds, cfg.batch_size,
                                             cfg.context_len, rng)
        if pool is not None:
            grad_vec, n_valid, nll_sum, ent_sum = pool.step(step, arrs)
            scale = denom_scale / n_valid
            if mcfg.head_mode == "gaussian":
                inv = 1.0 / n_valid
                stats = {"nll": nll_sum * inv, "entropy": ent_sum * inv}
                stats["total"] = stats["nll"] - cfg.lambda_ent * stats["entropy"]
            else:
                mse = nll_sum * scale
                stats = {"nll": mse, "entropy": 0.0, "total": mse}
            if not np.isfinite(stats["total"]):
                raise RuntimeError(
                    f"non-finite loss {stats['total']} at step {step} "
                    f"(batch fingerprint {_batch_fingerprint(arrs)})"
                )
            grad_vec *= scale
            nn.zero_grads(model.params)
            views = _views(grad_vec, pool.layout)
            for name, p in model.params.items():
                p.grad = views[name]
        else:
            nn.zero_grads(model.params)
            total, stats = loss_from_arrays(arrs, actions, mcfg, model.params,
                                            cfg.lambda_ent, train=True, rng=rng)
            if not np.isfinite(stats["total"]):
                raise RuntimeError(
                    f"non-finite loss {stats['total']} at step {step} "
                    f"(batch fingerprint {_batch_fingerprint(arrs)})"
                )
            nn.backward(total)
        nn.clip_grad_norm(model.params, cfg.clip_norm)
        nn.adam_step(adam, model.params)
        result.trace.append((step, stats["nll"], stats["entropy"], stats["total"]))

        if log_callback is not None:
            log_callback(step, stats)
        if ckpt_dir is not None and cfg.checkpoint_every > 0 \
                and step % cfg.checkpoint_every == 0:
            model.save(ckpt_dir / f"checkpoint_step{step}.ckpt",
                       extra=checkpoint_extra)
        if eval_callback is not None and cfg.eval_every > 0 \
                and step % cfg.eval_every == 0:
            eval_callback(step, model)
