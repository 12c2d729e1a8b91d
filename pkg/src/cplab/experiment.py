"""Run one configured experiment and write its run directory.

Run directory contents
----------------------
``config.yaml``      fully resolved experiment config
``steps.jsonl``      one JSON object per optimizer step, keys in this order:
                     step, phase, branch, loss, tau, lr, p_out, pl_ter,
                     oracle_wer, oracle_ter, blank_fraction, pl_len_ratio,
                     n_infeasible, cache_action, drawn_age, dev_ter
                     (null where a field does not apply)
``summary.json``     status (OK or DV), final dev/test TER and WER,
                     oracle correlation, phase start steps and wall time
``checkpoints/``     ``step_NNNNNN.npz`` every ``trainer.checkpoint_every``
                     steps, and ``final.npz``
``cache.json``       final cache contents (PL runs only)

``steps.jsonl`` contains no timing information, so equal configs and seeds
give byte-identical logs.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

from .config import ConfigError, ExperimentConfig, save_config
from .data import Corpus, generate_corpus, load_corpus
from .model import save_checkpoint
from .trainer import RunResult, Trainer, evaluate, oracle_correlation

log = logging.getLogger(__name__)

LOG_FORMAT = "cplab-steps/1"
SUMMARY_FORMAT = "cplab-summary/1"


def load_or_generate_corpus(cfg: ExperimentConfig, generate: bool = False) -> Corpus:
    """Load ``cfg.data_dir``; with ``generate`` fall back to building it in memory."""
    path = Path(cfg.data_dir)
    if (path / "manifest.json").exists():
        corpus = load_corpus(path)
        if corpus.config != cfg.corpus:
            raise ConfigError(
                f"corpus in {path} was generated with a different corpus config; "
                "rerun gen-data or point data_dir elsewhere"
            )
        return corpus
    if generate:
        return generate_corpus(cfg.corpus)
    raise FileNotFoundError(f"no corpus at {path}; run gen-data first")


def build_trainer(cfg: ExperimentConfig, corpus: Corpus, **callbacks) -> Trainer:
    return Trainer(
        cfg.encoder,
        cfg.trainer,
        corpus.features("labeled"),
        corpus.transcripts("labeled"),
        corpus.features("unlabeled"),
        dev=(corpus.features("dev"), corpus.transcripts("dev")),
        augment_cfg=cfg.augment,
        lr_schedule=cfg.lr,
        oracle=corpus.transcripts("unlabeled"),
        word_boundary=cfg.corpus.word_boundary,
        **callbacks,
    )


def run_experiment(
    cfg: ExperimentConfig,
    corpus: Corpus,
    run_dir: str | Path | None = None,
    seed: int | None = None,
) -> tuple[RunResult, dict]:
    """Train once. With ``run_dir`` the logs are streamed to disk as they happen."""
    if seed is not None:
        cfg = dataclasses.replace(cfg, trainer=dataclasses.replace(cfg.trainer, seed=seed))
    cfg.validate()
    t0 = time.perf_counter()

    log_fh = None
    callbacks = {}
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        save_config(cfg, run_dir / "config.yaml")
        log_fh = open(run_dir / "steps.jsonl", "w")

        def on_record(rec):
            log_fh.write(json.dumps(rec.to_dict()) + "\n")

        def on_checkpoint(state):
            save_checkpoint(state, run_dir / "checkpoints" / f"step_{state.step:06d}.npz")

        callbacks = {"on_record": on_record, "on_checkpoint": on_checkpoint}

    try:
        trainer = build_trainer(cfg, corpus, **callbacks)
        result = trainer.run()
    finally:
        if log_fh is not None:
            log_fh.close()

    test = evaluate(result.state, corpus.features("test"), corpus.transcripts("test"),
                    cfg.corpus.word_boundary)
    summary = {
        "format": SUMMARY_FORMAT,
        "log_format": LOG_FORMAT,
        "seed": cfg.trainer.seed,
        **result.summary,
        "dv": result.status == "DV",
        "test_ter": test["ter"],
        "test_wer": test["wer"],
        "oracle_correlation": oracle_correlation(result.records),
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    if run_dir is not None:
        save_checkpoint(result.state, run_dir / "checkpoints" / "final.npz")
        with open(run_dir / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=1)
        if result.cache is not None:
            with open(run_dir / "cache.json", "w") as fh:
                json.dump(result.cache.dump(), fh)
    log.info("seed %d: %s dev_ter=%.4f test_ter=%.4f", cfg.trainer.seed, summary["status"],
             summary.get("dev_ter", float("nan")), summary["test_ter"])
    return result, summary
