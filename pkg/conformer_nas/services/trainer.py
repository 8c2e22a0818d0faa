"""Alternating optimization of operation weights and architecture logits.

One search step, in order:

1. compute the approximation-step threshold ``S_a`` for the current step ``S``;
2. if ``S - S_0 >= S_a``, take one Adam step on the architecture logits using
   the validation loss (operation weights held constant) and set ``S_0 = S``;
3. take one Noam-scheduled Adam step on the operation weights using the
   training loss at rate ``noam_lrate(S + 1)``;
4. ``S += 1``.

During the first ``warmup_steps`` steps ``S_a`` is infinite, so the logits
stay untouched while the operation weights warm up.
"""

import logging
import math
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple, Union

import numpy as np

from ..autograd import backward, no_grad, reset_tape
from ..config import settings
from ..core.exceptions import DivergenceError, NasError
from ..models.module import Module, Parameter
from ..models.ops import segments
from ..schemas.config import DssConfig, RunConfig, config_hash
from ..schemas.genotype import Genotype
from ..schemas.records import (
    EpochSnapshot,
    EvalReport,
    ScheduleReport,
    SearchLogRow,
    SelectionRecord,
    TrainingMetrics,
    TrialRecord,
)
from . import artifacts
from .data import Batch, Dataset, Utterance, augment_batch, make_batches
from .objectives import batch_loss, corpus_error_rate, ctc_greedy_decode
from .optim import AdamMoments, NoamOptimizer, adam_update_alpha
from .search_space import (
    ConformerNetwork,
    DerivedModel,
    Supernet,
    build_supernet,
    derive_genotype,
    materialize,
    mixed_forward,
    sample_random_genotype,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def dss_threshold(step: int, config: DssConfig) -> float:
    """max(beta * (S - warmup) / warmup, 0) ** -0.5, infinite while the inner term is 0."""
    if config.force_one:
        return 1.0
    inner = max(config.beta * (step - config.warmup_steps) / config.warmup_steps, 0.0)
    if inner == 0.0:
        return math.inf
    return inner ** -0.5


@dataclass
class TrainState:
    step: int = 0
    last_alpha_step: int = 0
    omega_moments: AdamMoments = field(default_factory=AdamMoments)
    alpha_moments: AdamMoments = field(default_factory=AdamMoments)
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    alpha_updates: List[int] = field(default_factory=list)

    def check(self) -> None:
        if not self.step >= self.last_alpha_step >= 0:
            raise NasError(f"inconsistent step counters: S={self.step}, S0={self.last_alpha_step}")


def new_train_state(seed: int) -> TrainState:
    return TrainState(rng=np.random.default_rng([seed & 0xFFFFFFFF, 0x5EA]))


def alpha_gate(state: TrainState, config: DssConfig) -> Tuple[float, bool]:
    """(S_a, whether the architecture update is due at the current step).

    With ``force_one`` the update runs on every step, the plain one-step alternation.
    """
    threshold = dss_threshold(state.step, config)
    due = config.force_one or state.step - state.last_alpha_step >= threshold
    return threshold, due


def mark_alpha_update(state: TrainState) -> None:
    state.last_alpha_step = state.step
    state.alpha_updates.append(state.step)


def replay_alpha_update_steps(total_steps: int, config: DssConfig) -> List[int]:
    """Steps at which the architecture would be updated over ``total_steps`` steps, without a network."""
    state = TrainState()
    for _ in range(total_steps):
        _, due = alpha_gate(state, config)
        if due:
            mark_alpha_update(state)
        state.step += 1
    return state.alpha_updates


class DataAccessCounter:
    """Counts batch reads per (phase, split)."""

    def __init__(self) -> None:
        self.counts: Counter = Counter()

    def record(self, phase: str, batch: Batch) -> None:
        self.counts[(phase, batch.split)] += 1

    def reads(self, phase: str, split: str) -> int:
        return self.counts[(phase, split)]


@contextmanager
def _frozen(params: Iterable[Parameter]) -> Iterator[None]:
    params = list(params)
    previous = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, previous):
            p.requires_grad = flag


def _snapshot_buffers(module: Module) -> Dict[str, np.ndarray]:
    return {name: value.copy() for name, value in module.named_buffers()}


def _restore_buffers(module: Module, snapshot: Dict[str, np.ndarray]) -> None:
    for name, value in module.named_buffers():
        value[...] = snapshot[name]


def _require_finite(value: float, what: str, step: int, **diagnostics: float) -> None:
    if not math.isfinite(value):
        reset_tape()
        diagnostics[what] = value
        logger.error(f"Non-finite {what} at step {step}: {diagnostics}")
        raise DivergenceError(f"non-finite {what}", step, diagnostics)


def alpha_weight_columns(supernet: Supernet) -> Dict[str, float]:
    return {
        artifacts.weight_column(block, slot, name): weight
        for _, block, slot, name, _, weight in supernet.alpha.rows(0)
    }


def search_step(
    state: TrainState,
    supernet: Supernet,
    train_batch: Batch,
    valid_batch: Batch,
    config: RunConfig,
    counter: Optional[DataAccessCounter] = None,
) -> SearchLogRow:
    state.check()
    threshold, due = alpha_gate(state, config.dss)
    omega = dict(supernet.named_parameters())
    alpha = supernet.alpha.parameters()

    valid_loss = None
    if due:
        if counter is not None:
            counter.record("alpha", valid_batch)
        buffers = _snapshot_buffers(supernet)
        supernet.alpha.zero_grad()
        with _frozen(omega.values()):
            logits = mixed_forward(supernet, valid_batch.tensor(), True, valid_batch.lengths)
            loss = batch_loss(logits, valid_batch.labels, valid_batch.lengths, config.objective)
            valid_loss = loss.item()
            _require_finite(valid_loss, "validation loss", state.step, S_a=threshold)
            backward(loss)
        _restore_buffers(supernet, buffers)
        adam_update_alpha(
            alpha,
            moments=state.alpha_moments,
            lr=config.search.alpha_lr,
            beta1=config.search.alpha_beta1,
            beta2=config.search.alpha_beta2,
            eps=config.search.alpha_eps,
        )
        supernet.alpha.zero_grad()
        mark_alpha_update(state)

    if counter is not None:
        counter.record("omega", train_batch)
    batch = augment_batch(train_batch, config.augment, state.rng)
    supernet.zero_grad()
    with _frozen(alpha):
        logits = mixed_forward(supernet, batch.tensor(), True, batch.lengths)
        loss = batch_loss(logits, batch.labels, batch.lengths, config.objective)
        train_loss = loss.item()
        _require_finite(train_loss, "training loss", state.step, S_a=threshold,
                        valid_loss=valid_loss if valid_loss is not None else math.nan)
        backward(loss)
    lrate = NoamOptimizer(omega, config.noam, state.omega_moments).step(state.step + 1)
    supernet.zero_grad()

    row = SearchLogRow(
        step=state.step,
        train_loss=train_loss,
        valid_loss=valid_loss,
        lrate=lrate,
        s_a=threshold,
        alpha_updated=due,
        weights=alpha_weight_columns(supernet),
    )
    state.step += 1
    logger.debug(
        f"step {row.step}: train={train_loss:.4f} lr={lrate:.3e} S_a={threshold:.3f} alpha_updated={due}"
    )
    return row


@dataclass
class SearchResult:
    genotype: Genotype
    log: List[SearchLogRow]
    epochs: List[EpochSnapshot]
    checkpoints: List[Path]
    supernet: Supernet
    state: TrainState


def _search_sections(supernet: Supernet, state: TrainState) -> Dict[str, Dict[str, np.ndarray]]:
    adam = state.omega_moments.state_dict("omega")
    adam.update(state.alpha_moments.state_dict("alpha"))
    return {"model": supernet.state_dict(), "alpha": supernet.alpha.state_dict(), "adam": adam}


def save_search_checkpoint(
    directory: PathLike, name: str, supernet: Supernet, state: TrainState, config: RunConfig, epoch: int
) -> Path:
    header = {
        "kind": "supernet",
        "seed": supernet.seed,
        "epoch": epoch,
        "step": state.step,
        "last_alpha_step": state.last_alpha_step,
        "omega_adam_step": state.omega_moments.step,
        "alpha_adam_step": state.alpha_moments.step,
        "alpha_updates": list(state.alpha_updates),
        "rng_state": artifacts.rng_state(state.rng),
        "dropout_rng_state": artifacts.rng_state(supernet.dropout_rng),
        "genotype": derive_genotype(supernet.alpha).to_text(),
    }
    return artifacts.save_checkpoint(directory, name, _search_sections(supernet, state), config, header)


def restore_search(checkpoint: artifacts.Checkpoint) -> Tuple[Supernet, TrainState]:
    """Rebuild the supernet and counters stored by :func:`save_search_checkpoint`."""
    header = checkpoint.header
    supernet = build_supernet(checkpoint.config.space, header["seed"])
    supernet.load_state_dict(checkpoint.section("model"))
    supernet.alpha.load_state_dict(checkpoint.section("alpha"))
    state = TrainState(
        step=header["step"],
        last_alpha_step=header["last_alpha_step"],
        rng=artifacts.restore_rng(header["rng_state"]),
        alpha_updates=list(header["alpha_updates"]),
    )
    supernet.dropout_rng = artifacts.restore_rng(header["dropout_rng_state"])
    adam = checkpoint.section("adam")
    state.omega_moments.load_state_dict(adam, "omega", header["omega_adam_step"])
    state.alpha_moments.load_state_dict(adam, "alpha", header["alpha_adam_step"])
    state.check()
    return supernet, state


def run_search(
    config: RunConfig,
    dataset: Dataset,
    seed: Optional[int] = None,
    out_dir: Optional[PathLike] = None,
    counter: Optional[DataAccessCounter] = None,
    resume: Optional[artifacts.Checkpoint] = None,
) -> SearchResult:
    """Search for ``config.search.epochs`` epochs and derive the final genotype.

    With ``resume`` the supernet, optimizer moments, counters and random
    streams come from an epoch checkpoint and the search continues from the
    following epoch; the returned log covers only the resumed steps.
    """
    seed = config.run.seed if seed is None else seed
    out = Path(out_dir) if out_dir is not None else None
    first_epoch = 1
    if resume is not None:
        if resume.header.get("kind") != "supernet":
            raise NasError(f"cannot resume a search from a {resume.header.get('kind')!r} checkpoint")
        if resume.header["config_hash"] != config_hash(config):
            logger.warning("Resuming a search with a configuration that differs from the checkpoint's")
        supernet, state = restore_search(resume)
        seed = supernet.seed
        first_epoch = resume.header["epoch"] + 1
    else:
        supernet = build_supernet(config.space, seed)
        state = new_train_state(seed)
    columns = list(alpha_weight_columns(supernet))
    log = artifacts.SearchLogWriter(out / artifacts.SEARCH_LOG if out else None, columns)
    alpha_rows = list(supernet.alpha.rows(state.step))
    snapshots: List[EpochSnapshot] = []
    checkpoints: List[Path] = []

    def flush() -> None:
        log.flush()
        if out is not None:
            artifacts.write_alpha_table(out / artifacts.ALPHA_TABLE, alpha_rows)
            artifacts.write_jsonl(out / "epochs.jsonl", snapshots)

    logger.info(
        f"Starting search: {config.search.epochs} epochs, seed {seed}, "
        f"warmup {config.dss.warmup_steps}, beta {config.dss.beta}, force_one={config.dss.force_one}"
    )
    for epoch in range(first_epoch, config.search.epochs + 1):
        train_batches = make_batches(dataset.train, config.search.batch_size, "train", state.rng)
        valid_batches = make_batches(dataset.valid, config.search.batch_size, "valid", state.rng)
        losses = []
        for index, train_batch in enumerate(train_batches):
            try:
                row = search_step(state, supernet, train_batch, valid_batches[index % len(valid_batches)],
                                  config, counter)
            except DivergenceError as e:
                e.last_good_checkpoint = str(checkpoints[-1]) if checkpoints else None
                flush()
                raise
            log.append(row)
            losses.append(row.train_loss)
            if state.step % config.search.alpha_log_every == 0:
                alpha_rows.extend(supernet.alpha.rows(state.step))
            if state.step % settings.LOG_EVERY == 0:
                logger.info(f"Search step {state.step}: train loss {row.train_loss:.4f}, "
                            f"{len(state.alpha_updates)} alpha updates")

        snapshot = EpochSnapshot(
            epoch=epoch,
            step=state.step,
            alpha_updates=len(state.alpha_updates),
            mean_train_loss=float(np.mean(losses)),
            weights=alpha_weight_columns(supernet),
        )
        snapshots.append(snapshot)
        logger.info(f"Search epoch {epoch}: mean train loss {snapshot.mean_train_loss:.4f}, "
                    f"{snapshot.alpha_updates} alpha updates after {state.step} steps")
        flush()
        if out is not None:
            name = f"search-epoch{epoch:03d}"
            checkpoints.append(save_search_checkpoint(out, name, supernet, state, config, epoch))

    genotype = derive_genotype(supernet.alpha)
    if out is not None:
        checkpoints.append(
            save_search_checkpoint(out, "checkpoint-final", supernet, state, config, config.search.epochs)
        )
        artifacts.write_genotype(out / artifacts.GENOTYPE_FILE, genotype)
    logger.info(f"Search finished after {state.step} steps; derived genotype:\n{genotype.to_text()}")
    return SearchResult(genotype, list(log.rows), snapshots, checkpoints, supernet, state)


def evaluate(
    model: ConformerNetwork, utterances: List[Utterance], batch_size: int, split: str
) -> EvalReport:
    """Mean CTC loss (no smoothing term) and corpus token error rate, eval mode."""
    model.eval()
    total, pairs = 0.0, []
    with no_grad():
        for batch in make_batches(utterances, batch_size, split):
            logits = model(batch.tensor(), batch.lengths)
            total += batch_loss(logits, batch.labels, batch.lengths).item() * len(batch)
            for (start, length), ref in zip(segments(batch.lengths, logits.shape[0]), batch.labels):
                pairs.append((ctc_greedy_decode(logits.data[start:start + length]), ref))
    model.train()
    report = corpus_error_rate(pairs)
    return EvalReport(split=split, loss=total / max(len(utterances), 1),
                      token_error_rate=report.rate, utterances=len(utterances))


@dataclass
class RetrainResult:
    model: DerivedModel
    metrics: TrainingMetrics
    checkpoints: List[Path]


def save_model_checkpoint(
    directory: PathLike, name: str, model: DerivedModel, optimizer: NoamOptimizer, step: int,
    rng: np.random.Generator, config: RunConfig,
) -> Path:
    header = {
        "kind": "derived",
        "seed": model.seed,
        "step": step,
        "omega_adam_step": optimizer.moments.step,
        "rng_state": artifacts.rng_state(rng),
        "dropout_rng_state": artifacts.rng_state(model.dropout_rng),
        "genotype": model.genotype.to_text(),
    }
    sections = {"model": model.state_dict(), "adam": optimizer.moments.state_dict("omega")}
    return artifacts.save_checkpoint(directory, name, sections, config, header)


def retrain(
    genotype: Genotype,
    config: RunConfig,
    dataset: Dataset,
    epochs: Optional[int] = None,
    seed: Optional[int] = None,
    out_dir: Optional[PathLike] = None,
) -> RetrainResult:
    """Train a freshly materialized ``genotype`` with the Noam-scheduled CTC objective."""
    epochs = config.retrain.epochs if epochs is None else epochs
    seed = config.run.seed if seed is None else seed
    out = Path(out_dir) if out_dir is not None else None
    model = materialize(genotype, config.space, seed)
    optimizer = NoamOptimizer(dict(model.named_parameters()), config.noam)
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x7E7])
    step = 0
    epoch_losses: List[float] = []
    checkpoints: List[Path] = []

    for epoch in range(1, epochs + 1):
        losses = []
        for batch in make_batches(dataset.train, config.retrain.batch_size, "train", rng):
            batch = augment_batch(batch, config.augment, rng)
            model.train()
            optimizer.zero_grad()
            logits = model(batch.tensor(), batch.lengths)
            loss = batch_loss(logits, batch.labels, batch.lengths, config.objective)
            value = loss.item()
            if not math.isfinite(value):
                reset_tape()
                last_good = str(checkpoints[-1]) if checkpoints else None
                logger.error(f"Non-finite training loss at step {step} (last good checkpoint: {last_good})")
                raise DivergenceError("non-finite training loss", step, {"training loss": value}, last_good)
            backward(loss)
            step += 1
            optimizer.step(step)
            losses.append(value)
        epoch_losses.append(float(np.mean(losses)))
        logger.info(f"Retrain epoch {epoch}/{epochs}: mean train loss {epoch_losses[-1]:.4f}")
        if out is not None:
            checkpoints.append(save_model_checkpoint(out, f"retrain-epoch{epoch:03d}", model, optimizer,
                                                     step, rng, config))

    batch_size = config.retrain.batch_size
    train_report = evaluate(model, dataset.train, batch_size, "train")
    valid_report = evaluate(model, dataset.valid, batch_size, "valid")
    metrics = TrainingMetrics(
        genotype=[list(names) for names in genotype.as_names()],
        seed=seed,
        parameter_count=model.parameter_count(),
        steps=step,
        epoch_train_losses=epoch_losses,
        train_loss=train_report.loss,
        valid_loss=valid_report.loss,
        valid_token_error_rate=valid_report.token_error_rate,
    )
    if out is not None:
        checkpoints.append(save_model_checkpoint(out, "checkpoint-final", model, optimizer, step, rng, config))
        artifacts.write_jsonl(out / "metrics.jsonl", [metrics])
    logger.info(f"Retrained genotype: valid loss {metrics.valid_loss:.4f}, "
                f"valid error rate {metrics.valid_token_error_rate:.4f}")
    return RetrainResult(model, metrics, checkpoints)


def network_from_checkpoint(checkpoint: artifacts.Checkpoint) -> ConformerNetwork:
    kind = checkpoint.header.get("kind")
    if kind == "supernet":
        supernet, _ = restore_search(checkpoint)
        return supernet
    if kind == "derived":
        model = materialize(checkpoint.genotype, checkpoint.config.space, checkpoint.header["seed"])
        model.load_state_dict(checkpoint.section("model"))
        model.dropout_rng = artifacts.restore_rng(checkpoint.header["dropout_rng_state"])
        return model
    raise NasError(f"unknown checkpoint kind {kind!r}")


@dataclass
class RandomSearchResult:
    genotype: Genotype
    trials: List[TrialRecord]
    selection: SelectionRecord


def run_random_search(
    config: RunConfig,
    dataset: Dataset,
    trials: Optional[int] = None,
    budget_epochs: Optional[int] = None,
    seed: Optional[int] = None,
    out_dir: Optional[PathLike] = None,
) -> RandomSearchResult:
    """Train ``trials`` uniformly sampled genotypes and keep the best on validation."""
    trials = config.random_search.trials if trials is None else trials
    budget_epochs = config.random_search.budget_epochs if budget_epochs is None else budget_epochs
    seed = config.run.seed if seed is None else seed
    if trials < 1:
        raise NasError(f"random search needs at least one trial, got {trials}")

    records: List[TrialRecord] = []
    genotypes: List[Genotype] = []
    for index, child in enumerate(np.random.SeedSequence(seed & 0xFFFFFFFF).spawn(trials)):
        trial_seed = int(child.generate_state(1)[0])
        genotype = sample_random_genotype(config.space, np.random.default_rng(child))
        result = retrain(genotype, config, dataset, epochs=budget_epochs, seed=trial_seed)
        records.append(TrialRecord(
            trial=index,
            seed=trial_seed,
            genotype=result.metrics.genotype,
            parameter_count=result.metrics.parameter_count,
            train_loss=result.metrics.train_loss,
            valid_loss=result.metrics.valid_loss,
            valid_token_error_rate=result.metrics.valid_token_error_rate,
        ))
        genotypes.append(genotype)
        logger.info(f"Random trial {index + 1}/{trials}: valid error rate "
                    f"{records[-1].valid_token_error_rate:.4f}, valid loss {records[-1].valid_loss:.4f}")

    best = min(records, key=lambda r: (r.valid_token_error_rate, r.valid_loss, r.trial))
    selection = SelectionRecord(
        trial=best.trial,
        genotype=best.genotype,
        valid_loss=best.valid_loss,
        valid_token_error_rate=best.valid_token_error_rate,
    )
    if out_dir is not None:
        out = Path(out_dir)
        artifacts.write_jsonl(out / "random_search.jsonl", [*records, selection])
        artifacts.write_genotype(out / artifacts.GENOTYPE_FILE, genotypes[best.trial])
    return RandomSearchResult(genotypes[best.trial], records, selection)


def compare_schedules(
    config: RunConfig,
    dataset: Dataset,
    seed: Optional[int] = None,
    out_dir: Optional[PathLike] = None,
) -> List[ScheduleReport]:
    """Search with the gated schedule and with one-step alternation, then retrain both genotypes."""
    seed = config.run.seed if seed is None else seed
    reports = []
    for mode, force_one in (("dss", False), ("one_step", True)):
        mode_config = config.model_copy(update={"dss": config.dss.model_copy(update={"force_one": force_one})})
        mode_dir = Path(out_dir) / mode if out_dir is not None else None
        logger.info(f"Comparison: searching with mode {mode}")
        search = run_search(mode_config, dataset, seed, mode_dir)
        trained = retrain(search.genotype, mode_config, dataset, seed=seed)
        test = evaluate(trained.model, dataset.test, config.retrain.batch_size, "test")
        reports.append(ScheduleReport(
            mode=mode,
            genotype=[list(names) for names in search.genotype.as_names()],
            alpha_updates=len(search.state.alpha_updates),
            search_steps=search.state.step,
            search_train_loss=search.epochs[-1].mean_train_loss,
            retrain_valid_loss=trained.metrics.valid_loss,
            retrain_valid_token_error_rate=trained.metrics.valid_token_error_rate,
            test_token_error_rate=test.token_error_rate,
        ))
    if out_dir is not None:
        artifacts.write_jsonl(Path(out_dir) / "comparison.jsonl", reports)
    return reports
