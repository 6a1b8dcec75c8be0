"""Cross-entropy training with Adam, warmup + inverse-sqrt schedule, and checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .checkpoint import OPTIM_PREFIX, Checkpoint, load_checkpoint, save_checkpoint
from .corpus import BOS_ID, EOS_ID, PAD_ID
from .model import SEMANTIC_PREFIXES, SU4MT, ModelConfig
from .wpe import SpanSet

logger = logging.getLogger(__name__)

Example = tuple[Sequence[int], Sequence[int], SpanSet]


@dataclass
class TrainConfig:
    seed: int = 1
    lr: float = 7e-4
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    max_tokens: int = 1000
    epochs: int = 10
    max_steps: int | None = None
    smoothing: float = 0.0
    save_every: int = 1
    precision: int = 32

    def __post_init__(self):
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.warmup < 1 or self.max_tokens < 1 or self.save_every < 1:
            raise ValueError("warmup, max_tokens and save_every must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def lr_at(step: int, peak: float, warmup: int) -> float:
    """Linear warmup to `peak` at `warmup`, then decay with 1/sqrt(step)."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    return peak * min(step / warmup, math.sqrt(warmup / step))


def cross_entropy(
    logits: torch.Tensor,
    targets: torch.Tensor,
    pad_id: int = PAD_ID,
    smoothing: float = 0.0,
    reduction: str = "sum",
) -> torch.Tensor:
    """Negative log-likelihood over non-pad targets.

    With smoothing ε the per-token loss is (1-ε)·nll + ε·mean_v(-log p_v).
    """
    mask = targets != pad_id
    if not bool(mask.any()):
        raise ValueError("every target position is padding")
    logp = torch.log_softmax(logits, dim=-1)
    loss = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if smoothing:
        loss = (1.0 - smoothing) * loss - smoothing * logp.mean(-1)
    loss = loss[mask]
    if reduction == "sum":
        return loss.sum()
    if reduction == "mean":
        return loss.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class Batch:
    src: torch.Tensor
    tgt_in: torch.Tensor
    tgt_out: torch.Tensor
    spans: list[SpanSet]
    indices: list[int]

    @property
    def ntokens(self) -> int:
        return int((self.tgt_out != PAD_ID).sum())


def _pad(rows: Sequence[Sequence[int]]) -> torch.Tensor:
    width = max(len(r) for r in rows)
    return torch.tensor([list(r) + [PAD_ID] * (width - len(r)) for r in rows], dtype=torch.long)


def make_batch(examples: Sequence[Example], indices: Sequence[int]) -> Batch:
    src, tin, tout, spans = [], [], [], []
    for i in indices:
        s, t, ss = examples[i]
        if ss.sentence_len != len(s):
            raise ValueError(f"example {i}: spans cover {ss.sentence_len} of {len(s)} tokens")
        src.append(s)
        tin.append([BOS_ID, *t])
        tout.append([*t, EOS_ID])
        spans.append(ss)
    return Batch(_pad(src), _pad(tin), _pad(tout), spans, list(indices))


def make_batches(examples: Sequence[Example], max_tokens: int, order: Sequence[int]) -> list[Batch]:
    """Pack examples in `order` so that rows x longest side stays within budget."""
    batches, cur, longest = [], [], 0
    for i in order:
        s, t, _ = examples[i]
        n = max(len(s), len(t) + 1)
        if cur and (len(cur) + 1) * max(longest, n) > max_tokens:
            batches.append(make_batch(examples, cur))
            cur, longest = [], 0
        cur.append(int(i))
        longest = max(longest, n)
    if cur:
        batches.append(make_batch(examples, cur))
    return batches


def epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    return np.random.default_rng([seed, epoch]).permutation(n).tolist()


def build_model(config: ModelConfig, seed: int, dtype=torch.float32) -> SU4MT:
    torch.manual_seed(seed)
    return SU4MT(config).to(dtype)


def model_to_checkpoint(model: SU4MT, meta: dict, optimizer=None) -> Checkpoint:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.named_parameters()}
    if optimizer is not None:
        names = {p: k for k, p in model.named_parameters()}
        for p, state in optimizer.state.items():
            name = names[p]
            arrays[f"{OPTIM_PREFIX}{name}.exp_avg"] = state["exp_avg"].detach().numpy()
            arrays[f"{OPTIM_PREFIX}{name}.exp_avg_sq"] = state["exp_avg_sq"].detach().numpy()
    meta = {"config": model.config.to_dict(), **meta}
    return Checkpoint(meta, arrays)


def load_params(model: SU4MT, ckpt: Checkpoint, skip_prefixes: Sequence[str] = ()) -> None:
    params = ckpt.params()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith(tuple(skip_prefixes)):
                continue
            if name not in params:
                raise ValueError(f"checkpoint lacks parameter {name}")
            arr = params[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.array(arr)))


def model_from_checkpoint(
    ckpt: Checkpoint | str | Path, input_mode: str | None = None, dtype=torch.float32
) -> SU4MT:
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    cfg = ckpt.meta["config"]
    if input_mode is not None:
        cfg = {**cfg, "input_mode": input_mode}
    model = SU4MT(ModelConfig.from_dict(cfg)).to(dtype)
    load_params(model, ckpt)
    model.eval()
    return model


def _optimizer(model: SU4MT, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(),
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_eps,
        foreach=False,
    )


def _restore_optimizer(opt, model: SU4MT, ckpt: Checkpoint) -> None:
    arrays = ckpt.optim()
    step = float(ckpt.step)
    for name, p in model.named_parameters():
        key = f"{OPTIM_PREFIX}{name}"
        if key + ".exp_avg" in arrays:
            opt.state[p] = {
                "step": torch.tensor(step),
                "exp_avg": torch.from_numpy(np.array(arrays[key + ".exp_avg"])).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(np.array(arrays[key + ".exp_avg_sq"])).to(p.dtype),
            }


@dataclass
class TrainResult:
    model: SU4MT
    checkpoints: list[Path] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    step: int = 0


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    examples: Sequence[Example],
    out_dir: str | Path,
    init: Checkpoint | str | Path | None = None,
    resume: Checkpoint | str | Path | None = None,
    prefix: str = "checkpoint",
    on_step: Callable[[int, float, float], None] | None = None,
    keep_last: int | None = None,
) -> TrainResult:
    """Train from scratch, from a pretrained baseline (`init`), or resume.

    With `init`, every baseline parameter is copied from the checkpoint while
    the fusion layer and the input norm keep their fresh initialization.
    With `resume`, parameters, Adam moments and the step counter are
    restored; batch order and dropout masks are derived from (seed, epoch)
    and (seed, step), so a resumed run matches an uninterrupted one.
    Checkpoints are written every `save_every` epochs and at the end; with
    `keep_last`, older checkpoints written by this call are deleted.
    """
    if keep_last is not None and keep_last < 1:
        raise ValueError("keep_last must be >= 1")
    if not examples:
        raise ValueError("no training examples")
    cfg = train_config
    dtype = torch.float64 if cfg.precision == 64 else torch.float32
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = build_model(model_config, cfg.seed, dtype)
    opt = _optimizer(model, cfg)
    start = 0
    if init is not None and resume is not None:
        raise ValueError("use either init or resume, not both")
    if init is not None:
        init = init if isinstance(init, Checkpoint) else load_checkpoint(init)
        bad = model_config.arch_mismatch(ModelConfig.from_dict(init.meta["config"]))
        if bad:
            raise ValueError(f"init checkpoint does not match the model config: {bad}")
        load_params(model, init, skip_prefixes=SEMANTIC_PREFIXES)
    if resume is not None:
        resume = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        bad = model_config.arch_mismatch(ModelConfig.from_dict(resume.meta["config"]))
        if bad:
            raise ValueError(f"resume checkpoint does not match the model config: {bad}")
        load_params(model, resume)
        _restore_optimizer(opt, model, resume)
        start = resume.step

    result = TrainResult(model)
    step = 0
    meta_base = {"train": asdict(cfg)}

    def save(epoch):
        path = out_dir / f"{prefix}{step:07d}.ckpt"
        ck = model_to_checkpoint(model, {**meta_base, "step": step, "epoch": epoch}, opt)
        save_checkpoint(path, ck)
        result.checkpoints.append(path)
        if keep_last is not None:
            while len(result.checkpoints) > keep_last:
                result.checkpoints.pop(0).unlink()

    done = False
    for epoch in range(cfg.epochs):
        batches = make_batches(examples, cfg.max_tokens, epoch_order(len(examples), cfg.seed, epoch))
        for batch in batches:
            if step < start:
                step += 1
                continue
            step += 1
            lr = lr_at(step, cfg.lr, cfg.warmup)
            for g in opt.param_groups:
                g["lr"] = lr
            torch.manual_seed(cfg.seed * 1_000_003 + step)
            model.train()
            logits = model(batch.src, batch.spans, batch.tgt_in)
            loss = cross_entropy(logits, batch.tgt_out, smoothing=cfg.smoothing) / batch.ntokens
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            result.losses.append(float(loss.detach()))
            if on_step is not None:
                on_step(step, result.losses[-1], lr)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        if step <= start:
            continue
        last = done or epoch == cfg.epochs - 1
        if (epoch + 1) % cfg.save_every == 0 or last:
            save(epoch + 1)
        if done:
            break
    result.step = step
    model.eval()
    return result


@torch.no_grad()
def evaluate_loss(model: SU4MT, examples: Sequence[Example], max_tokens: int = 1000) -> float:
    """Per-token cross-entropy (no smoothing, no dropout) over `examples`."""
    was = model.training
    model.eval()
    total, ntok = 0.0, 0
    for batch in make_batches(examples, max_tokens, range(len(examples))):
        total += float(cross_entropy(model(batch.src, batch.spans, batch.tgt_in), batch.tgt_out))
        ntok += batch.ntokens
    model.train(was)
    return total / ntok
