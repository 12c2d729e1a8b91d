"""CTC objective, greedy decoding and temperature-scaled alignment sampling.

The blank class is always the last output index (``V - 1``) unless a
caller passes ``blank`` explicitly to the decoding helpers.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = [
    "log_softmax",
    "ctc_loss_grad",
    "ctc_batch_loss_grad",
    "is_feasible",
    "collapse",
    "greedy_alignment",
    "greedy_decode",
    "apply_temperature",
    "sample_alignment",
    "sample_decode",
]

NEG_INF = -np.inf


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def is_feasible(n_frames: int, target: Sequence[int]) -> bool:
    """True when ``n_frames`` can emit ``target`` (repeats need a blank between)."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return n_frames >= len(target) + repeats


def _lse3(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    m = np.maximum(np.maximum(a, b), c)
    finite = np.isfinite(m)
    safe = np.where(finite, m, 0.0)
    with np.errstate(under="ignore"):
        s = np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe)
    with np.errstate(divide="ignore"):
        return np.where(finite, safe + np.log(s), NEG_INF)


def ctc_batch_loss_grad(
    logits: Sequence[np.ndarray],
    targets: Sequence[Sequence[int]],
    blank: int | None = None,
) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
    """CTC negative log-likelihood and its gradient for a batch.

    Parameters
    ----------
    logits : sequence of (T_b, V) arrays
        Raw per-frame scores; softmax at temperature 1 is applied here.
    targets : sequence of token sequences
        Blank-free targets.
    blank : int, optional
        Blank index, defaults to ``V - 1``.

    Returns
    -------
    losses : (B,) array
        ``+inf`` for infeasible targets.
    grads : list of (T_b, V) arrays
        d loss_b / d logits_b; zeros for infeasible targets.
    feasible : (B,) bool array
    """
    B = len(logits)
    if B != len(targets):
        raise ValueError(f"{B} logit matrices but {len(targets)} targets")
    V = logits[0].shape[1]
    if blank is None:
        blank = V - 1
    lens_t = np.array([lg.shape[0] for lg in logits])
    lens_l = np.array([len(t) for t in targets])
    T = int(lens_t.max())
    S = int(2 * lens_l.max() + 1)

    logp = np.full((T, B, V), NEG_INF)
    probs = []
    for b, lg in enumerate(logits):
        lp = log_softmax(np.asarray(lg, dtype=np.float64))
        logp[: lg.shape[0], b] = lp
        probs.append(np.exp(lp))

    # blank-extended labels, padded states point at blank but get -inf emissions
    ext = np.full((B, S), blank, dtype=np.int64)
    state_ok = np.zeros((B, S), dtype=bool)
    skip_ok = np.zeros((B, S), dtype=bool)
    for b, tgt in enumerate(targets):
        tgt = np.asarray(tgt, dtype=np.int64)
        if tgt.size and (tgt.min() < 0 or tgt.max() >= V or np.any(tgt == blank)):
            raise ValueError("targets must be blank-free ids in [0, V)")
        n_s = 2 * len(tgt) + 1
        ext[b, 1:n_s:2] = tgt
        state_ok[b, :n_s] = True
        if len(tgt) > 1:
            skip_ok[b, 3:n_s:2] = tgt[1:] != tgt[:-1]

    # emissions: (T, B, S)
    emit = np.take_along_axis(logp, np.broadcast_to(ext[None], (T, B, S)), axis=2)
    emit = np.where(state_ok[None], emit, NEG_INF)
    frame_ok = np.arange(T)[:, None] < lens_t[None, :]  # (T, B)

    alpha = np.full((T, B, S), NEG_INF)
    alpha[0, :, 0] = emit[0, :, 0]
    if S > 1:
        alpha[0, :, 1] = emit[0, :, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        s1 = np.full_like(prev, NEG_INF)
        s1[:, 1:] = prev[:, :-1]
        s2 = np.full_like(prev, NEG_INF)
        s2[:, 2:] = prev[:, :-2]
        s2 = np.where(skip_ok, s2, NEG_INF)
        cur = _lse3(prev, s1, s2) + emit[t]
        alpha[t] = np.where(frame_ok[t][:, None], cur, prev)

    last = lens_t - 1
    ends = 2 * lens_l
    bidx = np.arange(B)
    a_last = alpha[last, bidx]
    log_like = np.logaddexp(
        a_last[bidx, ends],
        np.where(ends >= 1, a_last[bidx, np.maximum(ends - 1, 0)], NEG_INF),
    )
    feasible = np.isfinite(log_like)

    # beta_t(s): log prob of emitting frames t+1.. given state s at t
    beta = np.full((T, B, S), NEG_INF)
    init = np.full((B, S), NEG_INF)
    init[bidx, ends] = 0.0
    init[bidx[ends >= 1], ends[ends >= 1] - 1] = 0.0
    nxt = np.full((B, S), NEG_INF)
    for t in range(T - 1, -1, -1):
        if t < T - 1:
            be = nxt + emit[t + 1]
            n1 = np.full_like(be, NEG_INF)
            n1[:, :-1] = be[:, 1:]
            n2 = np.full_like(be, NEG_INF)
            n2[:, :-2] = np.where(skip_ok[:, 2:], be[:, 2:], NEG_INF)
            rec = _lse3(be, n1, n2)
        else:
            rec = np.full((B, S), NEG_INF)
        at_end = (t == last)[:, None]
        cur = np.where(at_end, init, np.where((t < last)[:, None], rec, NEG_INF))
        beta[t] = cur
        nxt = cur

    losses = np.where(feasible, -log_like, np.inf)
    grads = []
    for b in range(B):
        Tb, Sb = lens_t[b], 2 * lens_l[b] + 1
        if not feasible[b]:
            grads.append(np.zeros((Tb, V)))
            continue
        occ = alpha[:Tb, b, :Sb] + beta[:Tb, b, :Sb] - log_like[b]
        with np.errstate(under="ignore"):
            gamma = np.exp(occ)
        post = np.zeros((Tb, V))
        np.add.at(post.T, ext[b, :Sb], gamma.T)
        grads.append(probs[b] - post)
    return losses, grads, feasible


def ctc_loss_grad(
    logits: np.ndarray, target: Sequence[int], blank: int | None = None
) -> tuple[float, np.ndarray]:
    """Single-utterance CTC loss and gradient w.r.t. ``logits``.

    Returns ``(inf, zeros)`` when the target cannot fit in the frame budget.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] < 1 or logits.shape[1] < 2:
        raise ValueError(f"logits must be (T>=1, V>=2), got {logits.shape}")
    losses, grads, _ = ctc_batch_loss_grad([logits], [list(target)], blank)
    return float(losses[0]), grads[0]


def collapse(alignment: Sequence[int], blank: int) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    out: list[int] = []
    prev = None
    for a in alignment:
        a = int(a)
        if a != prev and a != blank:
            out.append(a)
        prev = a
    return out


def greedy_alignment(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(logits, axis=-1)


def greedy_decode(logits: np.ndarray, blank: int | None = None) -> list[int]:
    logits = np.asarray(logits)
    if blank is None:
        blank = logits.shape[-1] - 1
    return collapse(greedy_alignment(logits), blank)


def apply_temperature(logits: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise softmax of ``logits / tau``; one-hot argmax rows when ``tau == 0``."""
    if tau < 0:
        raise ValueError(f"temperature must be >= 0, got {tau}")
    logits = np.asarray(logits, dtype=np.float64)
    if tau == 0:
        out = np.zeros_like(logits)
        np.put_along_axis(out, greedy_alignment(logits)[..., None], 1.0, axis=-1)
        return out
    return np.exp(log_softmax(logits / tau))


def sample_alignment(logits: np.ndarray, tau: float, rng: np.random.Generator) -> np.ndarray:
    """Draw one label per frame independently from the tempered posterior.

    Uses inverse-CDF sampling with exactly one uniform per frame, so the
    random stream advances identically for every temperature.
    """
    post = apply_temperature(logits, tau)
    u = rng.random(post.shape[0])
    cdf = np.cumsum(post, axis=-1)
    idx = (cdf <= u[:, None]).sum(axis=-1)
    return np.minimum(idx, post.shape[-1] - 1)


def sample_decode(
    logits: np.ndarray, tau: float, rng: np.random.Generator, blank: int | None = None
) -> list[int]:
    logits = np.asarray(logits)
    if blank is None:
        blank = logits.shape[-1] - 1
    return collapse(sample_alignment(logits, tau, rng), blank)
