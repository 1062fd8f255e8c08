"""Training: Adam with warmup/inverse-sqrt schedule, CE + auxiliary CTC, checkpoints, distillation."""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import ctc as ctc_mod
from .decode import DecodeConfig, beam_search, greedy_decode
from .metrics import bleu, token_accuracy, wer
from .models import S2TModel, load_checkpoint, save_checkpoint
from .synthdata import BLANK, BOS, PAD, Batch, Dataset, SynthExample, Vocab, batcher, collate
from .tensor import (ContractError, NumericError, Tensor, backward, cross_entropy, log_softmax,
                     no_grad)

log = logging.getLogger(__name__)


class DivergenceError(NumericError):
    pass


@dataclass
class TrainConfig:
    lr_max: float = 2e-3
    warmup_steps: int = 400
    max_steps: int = 4000
    patience: int = 5
    batch_frames: int = 2000
    ctc_weight: float = 0.5
    label_smoothing: float = 0.1
    seed: int = 1
    avg_last_k: int = 5
    eval_every: int = 200
    valid_decode_n: int = 100  # validation examples decoded (greedy) per evaluation

    def errors(self) -> list[str]:
        e = []
        if self.warmup_steps < 1:
            e.append("train.warmup_steps must be >= 1")
        if not 0 <= self.ctc_weight <= 1:
            e.append("train.ctc_weight must be in [0, 1]")
        if self.patience < 0:
            e.append("train.patience must be >= 0")
        if self.max_steps < 1 or self.eval_every < 1:
            e.append("train.max_steps and train.eval_every must be >= 1")
        if self.lr_max <= 0:
            e.append("train.lr_max must be > 0")
        if self.avg_last_k < 1:
            e.append("train.avg_last_k must be >= 1")
        if not 0 <= self.label_smoothing < 1:
            e.append("train.label_smoothing must be in [0, 1)")
        if self.batch_frames < 1:
            e.append("train.batch_frames must be >= 1")
        return e


@dataclass
class AugmentConfig:
    enabled: bool = False
    freq_mask_size: int = 2
    time_mask_size: int = 4
    n_freq_masks: int = 1
    n_time_masks: int = 1

    def errors(self) -> list[str]:
        if min(self.freq_mask_size, self.time_mask_size, self.n_freq_masks, self.n_time_masks) < 0:
            return ["augment.* sizes and counts must be >= 0"]
        return []


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent named RNG stream derived from ``seed``."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


# ------------------------------------------------------------ schedule / optimizer


def noam_lr(step: int, cfg: TrainConfig) -> float:
    if step < 1:
        raise ContractError(f"step must be >= 1, got {step}")
    W = cfg.warmup_steps
    return cfg.lr_max * min(step / W, math.sqrt(W / step))


class Adam:
    """Bias-corrected Adam; moments live beside the parameter list."""

    def __init__(self, named_params, betas=(0.9, 0.98), eps: float = 1e-8):
        self.named = list(named_params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for _, p in self.named]
        self.v = [np.zeros_like(p.data) for _, p in self.named]
        self.t = 0

    def step(self, lr: float) -> None:
        for name, p in self.named:
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient in parameter {name}")
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for i, (_, p) in enumerate(self.named):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            upd = lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - upd).astype(p.dtype)


def adam_step(params, grads, state: dict | None, lr: float, betas=(0.9, 0.98), eps: float = 1e-8):
    """Functional Adam over arrays; returns (new_params, new_state)."""
    if state is None:
        state = {"t": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}
    for i, g in enumerate(grads):
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter {i}")
    t = state["t"] + 1
    b1, b2 = betas
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        new_p.append(p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v}


# ------------------------------------------------------------ features


def cmvn(features: np.ndarray, eps: float = 1e-8) -> tuple[np.ndarray, bool]:
    """Per-utterance zero mean / unit variance per feature; returns (out, normalized)."""
    x = np.asarray(features)
    if x.shape[0] < 2:
        return x.copy(), False
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=0)
    sd = x64.std(axis=0)
    return ((x64 - mu) / np.maximum(sd, eps)).astype(x.dtype), True


def spec_augment(features: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator,
                 length: int | None = None, return_masks: bool = False):
    """Zero random frequency bands and time spans (within the first ``length`` frames)."""
    x = np.array(features, copy=True)
    masks: list[tuple[str, int, int]] = []
    if cfg.enabled:
        T = x.shape[0] if length is None else int(length)
        F = x.shape[1]
        for _ in range(cfg.n_freq_masks):
            w = int(rng.integers(0, min(cfg.freq_mask_size, F) + 1))
            f0 = int(rng.integers(0, F - w + 1))
            x[:, f0:f0 + w] = 0
            masks.append(("freq", f0, w))
        for _ in range(cfg.n_time_masks):
            w = int(rng.integers(0, min(cfg.time_mask_size, T) + 1))
            t0 = int(rng.integers(0, T - w + 1))
            x[t0:t0 + w] = 0
            masks.append(("time", t0, w))
    return (x, masks) if return_masks else x


# ------------------------------------------------------------ loss


@dataclass
class LossParts:
    total: Tensor
    ce: float
    ctc: float


def compute_loss(model: S2TModel, batch: Batch, cfg: TrainConfig, features: np.ndarray | None = None) -> LossParts:
    feats = Tensor(batch.features if features is None else features)
    logits, sp = model.forward(feats, batch.feat_lens, batch.dec_in)
    ce = cross_entropy(logits, batch.labels, label_smoothing=cfg.label_smoothing)
    w = cfg.ctc_weight
    if sp.ctc_logits is None or w == 0:
        return LossParts(ce, float(ce.item()), 0.0)
    lp = log_softmax(sp.ctc_logits)
    per, ok = ctc_mod.ctc_loss_batch(lp, sp.ctc_lengths, batch.transcripts, BLANK, skip_infeasible=True)
    n_tok = sum(len(t) for t, k in zip(batch.transcripts, ok) if k)
    if n_tok == 0:
        return LossParts(ce * (1 - w), float(ce.item()), 0.0)
    ctc_l = per.sum() * (1.0 / n_tok)
    return LossParts(ce * (1 - w) + ctc_l * w, float(ce.item()), float(ctc_l.item()))


# ------------------------------------------------------------ decoding helpers


def banned_ids(vocab: Vocab) -> tuple[int, ...]:
    return (PAD, BOS, BLANK, *vocab.lang_tags)


def prefix_for(ex: SynthExample, vocab: Vocab) -> list[int]:
    if ex.task == "st_multilingual":
        return [BOS, vocab.lang_tag(ex.language)]
    return [BOS]


def content(target: list[int], task: str) -> list[int]:
    return target[1:] if task == "st_multilingual" else list(target)


def decode_dataset(model: S2TModel, dataset: Dataset, dcfg: DecodeConfig, greedy: bool = False,
                   batch_frames: int = 4000) -> list[list[int]]:
    """Hypothesis ids per example (forced language tag included, EOS stripped)."""
    vocab = dataset.params.vocab
    ban = banned_ids(vocab)
    model.eval()
    out: list[list[int] | None] = [None] * len(dataset)
    if greedy:
        from .synthdata import make_batches
        for group in make_batches(dataset, batch_frames):
            exs = [dataset[i] for i in group]
            b = collate(exs)
            sess = model.session(b.features, b.feat_lens, ban)
            pre = [prefix_for(ex, vocab) for ex in exs]
            lims = [dcfg.max_len_for_frames(ex.feature_len) for ex in exs]
            hyps = greedy_decode(sess, pre, dcfg, lims)
            for i, ex, h, p in zip(group, exs, hyps, pre):
                out[i] = p[1:] + h.output
    else:
        for i, ex in enumerate(dataset):
            sess = model.session(ex.features[None], [ex.feature_len], ban)
            p = prefix_for(ex, vocab)
            h = beam_search(sess, p, dcfg, dcfg.max_len_for_frames(ex.feature_len))
            out[i] = p[1:] + h.output
    return out


def score_outputs(dataset: Dataset, hyps: list[list[int]]) -> dict[str, float]:
    refs = [content(ex.target, ex.task) for ex in dataset]
    hs = [content(h, ex.task) for ex, h in zip(dataset, hyps)]
    return {"wer": wer(refs, hs), "bleu": bleu(refs, hs), "acc": token_accuracy(refs, hs)}


def valid_loss(model: S2TModel, dataset: Dataset, cfg: TrainConfig) -> float:
    model.eval()
    tot = n = 0.0
    with no_grad():
        for b in batcher(dataset, cfg.batch_frames):
            parts = compute_loss(model, b, cfg)
            k = float((b.labels != -100).sum())
            tot += parts.total.item() * k
            n += k
    return tot / n


# ------------------------------------------------------------ loop


METRICS_HEADER = "step,lr,train_loss,ce,ctc,valid_loss,valid_wer_or_bleu"


@dataclass
class TrainResult:
    checkpoints: list[Path]
    avg_path: Path | None
    metrics: list[dict]
    steps: int
    stopped_early: bool


def train_loop(model: S2TModel, train_set: Dataset, valid_set: Dataset, cfg: TrainConfig,
               aug: AugmentConfig = AugmentConfig(), out_dir: Path | None = None,
               metric: str = "wer", dcfg: DecodeConfig | None = None) -> TrainResult:
    """Train until ``max_steps`` or until validation loss stalls for ``patience`` evaluations.

    Writes ``ckpt_<step>.ckpt`` at each evaluation, ``metrics.csv`` and the
    average of the last ``avg_last_k`` checkpoints as ``avg.ckpt``.
    """
    errs = cfg.errors() + aug.errors()
    if errs:
        raise ContractError("; ".join(errs))
    dcfg = dcfg or DecodeConfig(beam=1)
    data_rng = stream(cfg.seed, "data")
    aug_rng = stream(cfg.seed, "augment")
    opt = Adam(model.named_parameters())
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(METRICS_HEADER + "\n")
    vsub = Dataset(valid_set.examples[:cfg.valid_decode_n], valid_set.params)
    ckpts: list[Path] = []
    states: list[dict] = []
    rows: list[dict] = []
    best, bad, step = math.inf, 0, 0
    run = {"loss": 0.0, "ce": 0.0, "ctc": 0.0, "n": 0}
    stopped = False
    while step < cfg.max_steps and not stopped:
        for b in batcher(train_set, cfg.batch_frames, data_rng):
            step += 1
            model.train()
            feats = b.features
            if aug.enabled:
                feats = np.stack([spec_augment(f, aug, aug_rng, n) for f, n in zip(feats, b.feat_lens)])
            try:
                parts = compute_loss(model, b, cfg, feats)
            except NumericError as e:
                raise DivergenceError(f"step {step}: {e}") from None
            lv = parts.total.item()
            if not math.isfinite(lv):
                raise DivergenceError(f"loss became {lv} at step {step}")
            model.zero_grad()
            backward(parts.total)
            lr = noam_lr(step, cfg)
            try:
                opt.step(lr)
            except NumericError as e:
                raise DivergenceError(f"step {step}: {e}") from None
            run["loss"] += lv
            run["ce"] += parts.ce
            run["ctc"] += parts.ctc
            run["n"] += 1
            if step % cfg.eval_every == 0 or step == cfg.max_steps:
                vl = valid_loss(model, valid_set, cfg)
                hyps = decode_dataset(model, vsub, dcfg, greedy=True, batch_frames=cfg.batch_frames)
                sc = score_outputs(vsub, hyps)
                n = max(run["n"], 1)
                row = {"step": step, "lr": lr, "train_loss": run["loss"] / n, "ce": run["ce"] / n,
                       "ctc": run["ctc"] / n, "valid_loss": vl,
                       "valid_wer_or_bleu": sc["wer"] if metric == "wer" else sc["bleu"]}
                rows.append(row)
                run = {"loss": 0.0, "ce": 0.0, "ctc": 0.0, "n": 0}
                log.info("step %d lr %.2e train %.4f valid %.4f %s %.4f", step, lr, row["train_loss"],
                         vl, metric, row["valid_wer_or_bleu"])
                state = {k: v.copy() for k, v in model.state_dict().items()}
                states.append(state)
                if out is not None:
                    p = out / f"ckpt_{step:06d}.ckpt"
                    save_checkpoint(p, state)
                    ckpts.append(p)
                    with open(out / "metrics.csv", "a") as fh:
                        fh.write(",".join(_fmt(row[k]) for k in METRICS_HEADER.split(",")) + "\n")
                if vl < best:
                    best, bad = vl, 0
                else:
                    bad += 1
                    if bad > cfg.patience:
                        stopped = True
                        break
            if step >= cfg.max_steps:
                break
    avg = average_states(states, cfg.avg_last_k) if states else None
    avg_path = None
    if avg is not None:
        model.load_state_dict(avg)
        if out is not None:
            avg_path = out / "avg.ckpt"
            save_checkpoint(avg_path, avg)
    model.eval()
    return TrainResult(ckpts, avg_path, rows, step, stopped)


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


# ------------------------------------------------------------ checkpoints


def average_states(states: list[dict], k: int) -> dict[str, np.ndarray]:
    if not states:
        raise ContractError("no checkpoints to average")
    sel = states[-k:]
    ref = sel[0]
    for s in sel[1:]:
        if list(s) != list(ref):
            raise ContractError("checkpoints hold different tensor names")
        for name in ref:
            if s[name].shape != ref[name].shape:
                raise ContractError(f"{name}: shape {s[name].shape} != {ref[name].shape}")
    out = {}
    for name in ref:
        acc = np.zeros(ref[name].shape, dtype=np.float64)
        for s in sel:
            acc += s[name]
        out[name] = (acc / len(sel)).astype(np.float32)
    return out


def average_checkpoints(paths, k: int) -> dict[str, np.ndarray]:
    """Elementwise mean of the last ``k`` of ``paths`` (given in step order)."""
    paths = list(paths)
    if len(paths) < k:
        raise ContractError(f"need {k} checkpoints, got {len(paths)}")
    return average_states([load_checkpoint(p) for p in paths[-k:]], k)


ENCODER_PREFIXES = ("frontend.", "enc_layers.", "speech_norm.", "ctc_head.")


def init_from_asr(st_model: S2TModel, asr_state: dict[str, np.ndarray]) -> S2TModel:
    """Copy speech-side weights (all but embedding and output layer for decoder-only)."""
    own = dict(st_model.named_parameters())
    if st_model.cfg.arch == "decoder_only":
        keep = [n for n in own if not n.startswith(("embed.", "out_proj."))]
    else:
        keep = [n for n in own if n.startswith(ENCODER_PREFIXES)]
    for n in keep:
        if n not in asr_state:
            raise ContractError(f"ASR checkpoint lacks {n}")
    st_model.load_state_dict({n: asr_state[n] for n in keep}, strict=False)
    return st_model


# ------------------------------------------------------------ distillation


@dataclass
class DistillResult:
    distilled: Dataset
    combined: Dataset
    n_kept_original: int


def distill_dataset(teacher: S2TModel, source: Dataset, dcfg: DecodeConfig,
                    greedy: bool = False) -> DistillResult:
    """Replace targets with teacher outputs; the combined set is original followed by distilled."""
    hyps = decode_dataset(teacher, source, dcfg, greedy=greedy)
    kept = 0
    exs = []
    for ex, h in zip(source, hyps):
        tgt = list(h)
        if not content(tgt, ex.task):
            tgt, kept = list(ex.target), kept + 1
        exs.append(SynthExample(ex.seed, ex.task, ex.features, ex.transcript, tgt, ex.language, kd=True))
    if kept:
        log.warning("%d empty teacher outputs replaced by original targets", kept)
    distilled = Dataset(exs, source.params)
    return DistillResult(distilled, Dataset(list(source.examples) + exs, source.params), kept)
