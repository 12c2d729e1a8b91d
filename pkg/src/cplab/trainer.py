"""Continuous pseudo-labeling with a curriculum-controlled cache.

A run has up to three phases:

``pt``          supervised steps on labeled data only (``M`` of them)
``fill``        ``C`` supervised steps, each also pseudo-labeling a fresh
                unlabeled batch and inserting it into the cache
``continuous``  each step takes the labeled branch with probability
                ``1 / (1 + lam)``, otherwise trains on a cached batch,
                re-labels it with the current model and either evicts it
                (probability ``p_out``) or writes it back

Exactly one :class:`StepRecord` is produced per optimizer step.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import ctc
from .cache import Cache, CacheEntry, PoutStrategy, compute_pout, pl_distance
from .data import Batcher
from .metrics import batch_ter, split_words
from .model import (
    AugmentConfig,
    DivergenceError,
    EncoderConfig,
    LRSchedule,
    ModelState,
    adagrad_step,
    augment,
    backward,
    forward,
    init_state,
    set_dropout,
)

log = logging.getLogger(__name__)

# sub-stream indices of the trainer seed
_STREAMS = ("init", "labeled", "unlabeled", "branch", "augment", "dropout", "sampling",
            "cache", "evict")
_PURPOSE_FILL, _PURPOSE_REGEN, _PURPOSE_FRESH = 0, 1, 2


@dataclass(frozen=True)
class TauSchedule:
    """Sampling temperature as a function of the step.

    ``linear``: ``max(end, start - (start - end) * k / steps)``.
    ``constant``: ``value`` for every step (0 gives argmax pseudo-labels).
    """

    kind: str = "linear"
    start: float = 1.0
    end: float = 0.1
    steps: int | None = None
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("linear", "constant"):
            raise ValueError(f"unknown tau schedule {self.kind!r}")
        if self.kind == "linear":
            if not self.start >= self.end >= 0:
                raise ValueError("need tau start >= end >= 0")
            if self.steps is not None and self.steps < 1:
                raise ValueError("tau schedule steps must be >= 1")
        elif self.value < 0:
            raise ValueError("tau must be >= 0")

    @classmethod
    def parse(cls, text: str) -> "TauSchedule":
        """``linear:START:END[:STEPS]`` or ``constant:VALUE``."""
        parts = str(text).split(":")
        try:
            if parts[0] == "constant" and len(parts) == 2:
                return cls("constant", value=float(parts[1]))
            if parts[0] == "linear" and len(parts) in (3, 4):
                steps = int(parts[3]) if len(parts) == 4 else None
                return cls("linear", float(parts[1]), float(parts[2]), steps)
        except ValueError as exc:
            raise ValueError(f"bad tau schedule {text!r}: {exc}") from None
        raise ValueError(f"bad tau schedule {text!r}")

    def __str__(self) -> str:
        if self.kind == "constant":
            return f"constant:{self.value:g}"
        tail = f":{self.steps}" if self.steps is not None else ""
        return f"linear:{self.start:g}:{self.end:g}{tail}"


def temperature(k: int, sched: TauSchedule, default_steps: int | None = None) -> float:
    if k < 0:
        raise ValueError("step must be >= 0")
    if sched.kind == "constant":
        return sched.value
    steps = sched.steps if sched.steps is not None else default_steps
    if not steps:
        raise ValueError("linear tau schedule needs a step count")
    return max(sched.end, sched.start - (sched.start - sched.end) * k / steps)


@dataclass
class TrainerConfig:
    M: int = 0
    C: int = 64
    lam: float = 5.0
    pout: str = "dynamic_then_one:identity"
    pl_writeback: str = "new"
    tau: str = "linear:1:0.1"
    K: int = 2000
    max_steps: int = 2400
    batch_size: int | None = 8
    max_frames: int | None = None
    eval_every: int = 200
    dropout_high: float = 0.3
    dropout_low: float = 0.1
    supervised_only: bool = False
    divergence_window: int = 60
    divergence_warmup: int = 200
    checkpoint_every: int = 0
    pl_workers: int = 1
    seed: int = 0

    def pout_strategy(self) -> PoutStrategy:
        return PoutStrategy.parse(self.pout, default_switch=self.K)

    def tau_schedule(self) -> TauSchedule:
        return TauSchedule.parse(self.tau)

    def validate(self) -> None:
        if self.M < 0:
            raise ValueError("M must be >= 0")
        if self.C < 1:
            raise ValueError("C must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.pl_writeback not in ("old", "new"):
            raise ValueError("pl_writeback must be 'old' or 'new'")
        if not self.supervised_only and self.max_steps <= self.M + self.C:
            raise ValueError(
                f"max_steps={self.max_steps} must exceed M + C = {self.M + self.C}"
            )
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if (self.batch_size is None) == (self.max_frames is None):
            raise ValueError("set exactly one of batch_size or max_frames")
        if self.eval_every < 1 or self.divergence_window < 1 or self.pl_workers < 1:
            raise ValueError("eval_every, divergence_window and pl_workers must be >= 1")
        for name in ("dropout_high", "dropout_low"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        self.pout_strategy()
        self.tau_schedule()


@dataclass
class StepRecord:
    step: int
    phase: str
    branch: str
    loss: float | None
    tau: float
    lr: float
    p_out: float | None = None
    pl_ter: float | None = None
    oracle_wer: float | None = None
    oracle_ter: float | None = None
    blank_fraction: float | None = None
    pl_len_ratio: float | None = None
    n_infeasible: int = 0
    cache_action: str | None = None
    drawn_age: int | None = None
    dev_ter: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    status: str
    state: ModelState
    records: list[StepRecord]
    summary: dict
    cache: Cache | None = None


def detect_divergence(
    records: Sequence[StepRecord],
    window: int = 60,
    warmup: int = 0,
    blank_threshold: float = 0.95,
    length_threshold: float = 0.05,
    dev_threshold: float = 0.95,
) -> str | None:
    """``"DV"`` when the recent pseudo-labels (or dev error) look collapsed.

    Looks at the last ``window`` unlabeled-branch records: mean blank
    fraction above ``blank_threshold`` or mean PL length ratio below
    ``length_threshold``. Separately, every dev evaluation within the last
    ``window`` steps past ``warmup`` being above ``dev_threshold`` also
    counts, provided that span covers a full window.
    """
    unl = [r for r in records if r.branch == "unlabeled" and r.blank_fraction is not None]
    if len(unl) >= window:
        recent = unl[-window:]
        if np.mean([r.blank_fraction for r in recent]) > blank_threshold:
            return "DV"
        if np.mean([r.pl_len_ratio for r in recent]) < length_threshold:
            return "DV"
    if records:
        last = records[-1].step
        span = [r for r in records if r.step > last - window and r.step > warmup]
        devs = [r.dev_ter for r in span if r.dev_ter is not None]
        if len(span) >= window and devs and min(devs) > dev_threshold:
            return "DV"
    return None


def oracle_correlation(records: Sequence[StepRecord | dict], min_points: int = 30) -> float | None:
    """Pearson r between PL-evolution distance and oracle error per batch.

    ``None`` when there are fewer than ``min_points`` pairs or either
    series has zero variance.
    """
    xs, ys = [], []
    for r in records:
        d = r if isinstance(r, dict) else r.to_dict()
        if d.get("branch") != "unlabeled":
            continue
        if d.get("pl_ter") is None or d.get("oracle_wer") is None:
            continue
        xs.append(d["pl_ter"])
        ys.append(d["oracle_wer"])
    if len(xs) < min_points:
        return None
    x, y = np.asarray(xs), np.asarray(ys)
    if x.std() == 0 or y.std() == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def evaluate(
    state: ModelState,
    features: Mapping[str, np.ndarray],
    transcripts: Mapping[str, Sequence[int]],
    word_boundary: int = 0,
    chunk: int = 64,
) -> dict:
    """Greedy-decode ``features`` and score pooled TER and WER."""
    ids = sorted(features)
    blank = state.config.vocab_size - 1
    hyps = []
    for i in range(0, len(ids), chunk):
        logits, _ = forward(state, [features[u] for u in ids[i : i + chunk]])
        hyps.extend(ctc.greedy_decode(lg, blank) for lg in logits)
    refs = [list(transcripts[u]) for u in ids]
    return {
        "ter": batch_ter(refs, hyps),
        "wer": batch_ter([split_words(r, word_boundary) for r in refs],
                         [split_words(h, word_boundary) for h in hyps]),
    }


class Trainer:
    """Runs one experiment end to end.

    The trainer only ever sees features for unlabeled utterances. ``oracle``
    (golden unlabeled transcripts) feeds analysis fields of the step
    records and nothing else.
    """

    def __init__(
        self,
        encoder: EncoderConfig,
        config: TrainerConfig,
        labeled: Mapping[str, np.ndarray],
        labels: Mapping[str, Sequence[int]],
        unlabeled: Mapping[str, np.ndarray],
        dev: tuple[Mapping[str, np.ndarray], Mapping[str, Sequence[int]]] | None = None,
        augment_cfg: AugmentConfig | None = None,
        lr_schedule: LRSchedule | None = None,
        oracle: Mapping[str, Sequence[int]] | None = None,
        word_boundary: int = 0,
        on_record: Callable[[StepRecord], None] | None = None,
        on_checkpoint: Callable[[ModelState], None] | None = None,
    ):
        config.validate()
        encoder.validate()
        if not labeled:
            raise ValueError("need at least one labeled utterance")
        if set(labeled) != set(labels):
            raise ValueError("labeled features and labels must share ids")
        if not unlabeled and not config.supervised_only:
            raise ValueError("need unlabeled utterances for pseudo-labeling")
        self.encoder = encoder
        self.config = config
        self.labeled = labeled
        self.labels = labels
        self.unlabeled = unlabeled
        self.dev = dev
        self.augment_cfg = augment_cfg if augment_cfg is not None else AugmentConfig()
        self.lr = lr_schedule if lr_schedule is not None else LRSchedule()
        self.oracle = oracle
        self.word_boundary = word_boundary
        self.on_record = on_record
        self.on_checkpoint = on_checkpoint
        self.blank = encoder.vocab_size - 1
        self.pout = config.pout_strategy()
        self.tau_sched = config.tau_schedule()

        seeds = np.random.SeedSequence(config.seed).spawn(len(_STREAMS))
        self.rngs = {n: np.random.default_rng(s) for n, s in zip(_STREAMS, seeds)}
        self.sampling_key = int(seeds[_STREAMS.index("sampling")].generate_state(1)[0])

        self.state = init_state(encoder, self.rngs["init"])
        first = config.dropout_high if (config.M > 0 or config.supervised_only) else config.dropout_low
        set_dropout(self.state, first)
        self.cache = Cache(config.C, self.rngs["cache"])
        self.records: list[StepRecord] = []
        self._batch_serial = 0
        self._phase_start: dict[str, int] = {}
        bk = dict(batch_size=config.batch_size, max_frames=config.max_frames)
        self._labeled_stream = iter(
            Batcher({u: x.shape[0] for u, x in labeled.items()}, self.rngs["labeled"], **bk)
        )
        self._unlabeled_stream = (
            iter(Batcher({u: x.shape[0] for u, x in unlabeled.items()},
                         self.rngs["unlabeled"], **bk))
            if unlabeled else None
        )
        self._output_frames = {
            u: encoder.output_frames(x.shape[0]) for d in (labeled, unlabeled) for u, x in d.items()
        }

    # -- helpers ---------------------------------------------------------

    def tau_at(self, k: int) -> float:
        return temperature(k, self.tau_sched, default_steps=self.config.K)

    def _train_step(self, feats: list[np.ndarray], targets: list[list[int]]):
        """Augment, forward, CTC, backward, Adagrad. Returns (mean loss, n_infeasible)."""
        k = self.state.step
        x = [augment(f, self.augment_cfg, k, self.rngs["augment"]) for f in feats]
        logits, tape = forward(self.state, x, train=True, rng=self.rngs["dropout"])
        losses, grads, ok = ctc.ctc_batch_loss_grad(logits, targets, self.blank)
        n_ok = int(ok.sum())
        scale = 1.0 / n_ok if n_ok else 0.0
        grads = [g * scale for g in grads]
        grad = backward(self.state, tape, grads)
        self.state = adagrad_step(self.state, grad, self.lr)
        loss = float(losses[ok].mean()) if n_ok else None
        return loss, len(targets) - n_ok

    def _utt_rng(self, step: int, purpose: int, position: int) -> np.random.Generator:
        return np.random.default_rng([self.sampling_key, step, purpose, position])

    def generate_pls(self, ids: Sequence[str], tau: float, step: int, purpose: int):
        """Inference-mode pseudo-labels for ``ids``.

        Each utterance samples from its own stream keyed by (step, purpose,
        position), so results do not depend on ``pl_workers``.
        """
        logits, _ = forward(self.state, [self.unlabeled[u] for u in ids])

        def one(j):
            return ctc.sample_alignment(logits[j], tau, self._utt_rng(step, purpose, j))

        if self.config.pl_workers > 1:
            with ThreadPoolExecutor(self.config.pl_workers) as ex:
                aligns = list(ex.map(one, range(len(ids))))
        else:
            aligns = [one(j) for j in range(len(ids))]
        pls = [ctc.collapse(a, self.blank) for a in aligns]
        frames = sum(len(a) for a in aligns)
        stats = {
            "blank_fraction": float(sum(int((a == self.blank).sum()) for a in aligns) / frames),
            "pl_len_ratio": float(sum(len(p) for p in pls) / frames),
        }
        return pls, stats

    def _oracle_fields(self, ids: Sequence[str], pls: Sequence[Sequence[int]]) -> dict:
        if self.oracle is None:
            return {}
        refs = [list(self.oracle[u]) for u in ids]
        return {
            "oracle_ter": batch_ter(refs, pls),
            "oracle_wer": batch_ter([split_words(r, self.word_boundary) for r in refs],
                                    [split_words(p, self.word_boundary) for p in pls]),
        }

    def _new_entry(self, step: int, tau: float, purpose: int) -> tuple[CacheEntry, dict]:
        ids = next(self._unlabeled_stream)
        pls, stats = self.generate_pls(ids, tau, step, purpose)
        self._batch_serial += 1
        return CacheEntry(self._batch_serial, list(ids), pls, step), stats

    def _emit(self, rec: StepRecord) -> None:
        k = rec.step
        if self.dev is not None and (k % self.config.eval_every == 0 or k == self.config.max_steps):
            rec.dev_ter = evaluate(self.state, *self.dev, self.word_boundary)["ter"]
        self.records.append(rec)
        if self.on_record is not None:
            self.on_record(rec)
        if self.on_checkpoint and self.config.checkpoint_every and k % self.config.checkpoint_every == 0:
            self.on_checkpoint(self.state)

    def _labeled_step(self, phase: str, tau: float, **extra) -> StepRecord:
        ids = next(self._labeled_stream)
        lr = self.lr(self.state.step)
        loss, bad = self._train_step([self.labeled[u] for u in ids],
                                     [list(self.labels[u]) for u in ids])
        return StepRecord(self.state.step, phase, "labeled", loss, tau, lr,
                          n_infeasible=bad, **extra)

    def _diverged(self) -> bool:
        return detect_divergence(self.records, self.config.divergence_window,
                                 self.config.divergence_warmup) == "DV"

    # -- phases ----------------------------------------------------------

    def run_pt_phase(self, steps: int | None = None) -> ModelState:
        """``steps`` (default ``M``) supervised steps, then lower the dropout."""
        steps = self.config.M if steps is None else steps
        self._phase_start["pt"] = self.state.step
        for _ in range(steps):
            self._emit(self._labeled_step("pt", self.tau_at(self.state.step)))
        if not self.config.supervised_only:
            set_dropout(self.state, self.config.dropout_low)
        return self.state

    def run_fill_phase(self) -> Cache:
        if len(self.cache) != 0:
            raise RuntimeError("fill phase needs an empty cache")
        self._phase_start["fill"] = self.state.step
        for _ in range(self.config.C):
            k = self.state.step + 1
            tau = self.tau_at(self.state.step)
            entry, stats = self._new_entry(k, tau, _PURPOSE_FILL)
            self.cache.insert(entry)
            rec = self._labeled_step("fill", tau, **stats)
            self._emit(rec)
        return self.cache

    def run_continuous_phase(self) -> str:
        """Run until ``max_steps``; returns ``"OK"`` or ``"DV"``."""
        cfg = self.config
        self._phase_start["continuous"] = self.state.step
        p_labeled = 1.0 / (1.0 + cfg.lam)
        while self.state.step < cfg.max_steps:
            tau = self.tau_at(self.state.step)
            if self.rngs["branch"].random() < p_labeled:
                self._emit(self._labeled_step("continuous", tau))
                continue
            entry = self.cache.draw()
            lr = self.lr(self.state.step)
            loss, bad = self._train_step([self.unlabeled[u] for u in entry.utterance_ids],
                                         [list(p) for p in entry.pls])
            k = self.state.step
            new_pls, stats = self.generate_pls(entry.utterance_ids, tau, k, _PURPOSE_REGEN)
            p_out = compute_pout(self.pout, k, entry.pls, new_pls, self.word_boundary)
            dist = pl_distance(entry.pls, new_pls, self.pout.rho, self.word_boundary)
            if self.rngs["evict"].random() < p_out:
                fresh, _ = self._new_entry(k, tau, _PURPOSE_FRESH)
                self.cache.replace(fresh)
                action = "replace"
            else:
                self.cache.readmit(entry, cfg.pl_writeback, new_pls, k)
                action = "readmit"
            rec = StepRecord(
                k, "continuous", "unlabeled", loss, tau, lr,
                p_out=p_out, pl_ter=dist, n_infeasible=bad, cache_action=action,
                drawn_age=k - entry.created_step, **stats,
                **self._oracle_fields(entry.utterance_ids, new_pls),
            )
            self._emit(rec)
            if self._diverged():
                return "DV"
        return "OK"

    def run(self) -> RunResult:
        cfg = self.config
        status, reason = "OK", None
        try:
            if cfg.supervised_only:
                self.run_pt_phase(cfg.max_steps)
            else:
                self.run_pt_phase()
                self.run_fill_phase()
                status = self.run_continuous_phase()
                if status == "DV":
                    reason = "collapsed pseudo-labels"
        except DivergenceError as exc:
            status, reason = "DV", str(exc)
        if status == "DV":
            log.warning("run diverged at step %d: %s", self.state.step, reason)
        summary = {"status": status, "steps": self.state.step, "divergence_reason": reason}
        if self.dev is not None:
            ev = evaluate(self.state, *self.dev, self.word_boundary)
            summary.update(dev_ter=ev["ter"], dev_wer=ev["wer"])
        summary["phase_start"] = dict(self._phase_start)
        return RunResult(status, self.state, self.records, summary,
                         None if cfg.supervised_only else self.cache)
