"""Pipeline stages behind the command line: train, search, sample, characterize,
compare, oracle and the end-to-end demo.

Every stage reads its inputs from and writes its outputs to the run directory, and
records its wall time in a separate ``<stage>.timing.json`` sidecar so data outputs
stay reproducible from (config, seed).
"""
import dataclasses
import json
import logging
import time
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional

import pandas as pd

from components.checkpoint import resume_state, save_checkpoint
from components.compare import build_report, write_report
from components.ising import IsingModel, RandomSource, read_model, write_model
from components.mc_kernels import Budget, Schedule, calibrate_t_start, default_regimes, sa_campaign
from components.oracle import enumerate_landscape
from components.rbm import (
    Rbm,
    TrainingConfig,
    load_snapshot,
    rbm_to_ising,
    read_dataset,
    snapshot_name,
    synthetic_dataset,
    train_cd,
    write_dataset,
    write_rbm,
)
from components.samplers import (
    AnnealFunctions,
    SampleSet,
    config_digest,
    ingest_reads,
    read_anneal_table,
    sample_exhaustive,
    sample_sa,
    sample_sqa,
    write_reads,
)
from components.valley import (
    ValleyRegistry,
    WarmingConfig,
    characterize_valley,
    register_campaign,
    register_sample,
    zero_energy_links,
)
from utils.errors import DataError, DimensionMismatchError, ResourceCapError
from utils.run_config import RunConfig, SamplerSpec, load_config

logger = logging.getLogger(__name__)

STREAM_DATASET = 10
STREAM_RBM_INIT = 11
STREAM_SEARCH = 20
STREAM_CALIBRATE = 21
STREAM_WARM = 30
STREAM_SAMPLE = 40

DATASET_FILE = "dataset.txt"
HISTORY_FILE = "train_history.csv"
MODEL_FILE = "ising_model.txt"
CHECKPOINT_FILE = "search.ckpt"
SEARCH_REGISTRY_FILE = "search_registry.csv"
SEARCH_CUTS_FILE = "search_cuts.csv"
VALLEYS_FILE = "valleys.csv"
COMPARE_DIR = "compare"
LANDSCAPE_FILE = "oracle_landscape.csv"
ORACLE_MINIMA_FILE = "oracle_minima.csv"
DEMO_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "demo.env"


@dataclass
class StageResult:
    stage: str
    summary: str
    outputs: List[Path] = field(default_factory=list)
    seconds: float = 0.0


def samples_file(name: str) -> str:
    return f"samples_{name}.txt"


def _stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


@contextmanager
def _timed(stage: str, out_dir: Path) -> Iterator[StageResult]:
    result = StageResult(stage, "")
    started = time.perf_counter()
    yield result
    result.seconds = time.perf_counter() - started
    sidecar = out_dir / f"{stage}.timing.json"
    sidecar.write_text(json.dumps({"stage": stage, "seconds": result.seconds}, indent=2) + "\n", encoding="utf-8")
    logger.info("%s finished in %.2fs", stage, result.seconds)


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DataError(f"missing upstream file {path}; run '{producer}' first")
    return path


def resolve_rbm(cfg: RunConfig, out_dir: Path) -> Optional[Rbm]:
    """The RBM snapshot behind the model, or None for a model file."""
    if cfg.model.source == "file":
        return None
    return load_snapshot(out_dir, cfg.model.epoch or None)


def resolve_model(cfg: RunConfig, out_dir: Path) -> IsingModel:
    """The Ising model under study: a model file, or an RBM snapshot converted to spins."""
    rbm = resolve_rbm(cfg, out_dir)
    if rbm is None:
        path = Path(cfg.model.path)
        if not path.exists():
            raise DataError(f"model file not found: {path}")
        return read_model(path)
    model, constant = rbm_to_ising(rbm)
    logger.debug("RBM converted to n=%d Ising model, energy offset %.6g", model.n, constant)
    return model


def _training_patterns(cfg: RunConfig, out_dir: Path) -> Optional[int]:
    path = out_dir / DATASET_FILE
    if cfg.model.source != "rbm" or not path.exists():
        return None
    return read_dataset(path).size


def cmd_train(cfg: RunConfig, out_dir: Path) -> StageResult:
    with _timed("train", out_dir) as result:
        rbm_cfg = cfg.rbm
        if rbm_cfg.dataset:
            path = Path(rbm_cfg.dataset)
            if not path.exists():
                raise DataError(f"dataset not found: {path}")
            data = read_dataset(path)
        else:
            data = synthetic_dataset(
                rbm_cfg.n_visible,
                rbm_cfg.synthetic_prototypes,
                rbm_cfg.synthetic_per_prototype,
                rbm_cfg.synthetic_flip,
                RandomSource(cfg.seed, STREAM_DATASET),
            )
        if data.width != rbm_cfg.n_visible:
            raise DimensionMismatchError(rbm_cfg.n_visible, data.width, "dataset pattern")
        write_dataset(data, out_dir / DATASET_FILE)

        initial = Rbm.random(rbm_cfg.n_visible, rbm_cfg.n_hidden, RandomSource(cfg.seed, STREAM_RBM_INIT), rbm_cfg.init_scale)
        training = TrainingConfig(
            cd_k=rbm_cfg.cd_k,
            learning_rate=rbm_cfg.learning_rate,
            epochs=max(rbm_cfg.epochs),
            batch_size=rbm_cfg.batch_size,
            seed=cfg.seed,
            snapshot_epochs=rbm_cfg.epochs,
        )
        trained = train_cd(initial, data, training)
        for epoch, snapshot in trained.snapshots.items():
            path = out_dir / snapshot_name(epoch)
            write_rbm(snapshot, path)
            result.outputs.append(path)
        history = pd.DataFrame([dataclasses.asdict(s) for s in trained.history])
        history.to_csv(out_dir / HISTORY_FILE, index=False, float_format="%.17g", lineterminator="\n")
        result.outputs.append(out_dir / HISTORY_FILE)
        final_error = trained.history[-1].reconstruction_error
        result.summary = (
            f"train: {len(trained.snapshots)} snapshots over {training.epochs} epochs "
            f"({trained.presentations} presentations), final reconstruction error {final_error:.4f}"
        )
    return result


def _campaign_regimes(cfg: RunConfig, model: IsingModel) -> List[Schedule]:
    t_start = cfg.search.t_start or calibrate_t_start(model, RandomSource(cfg.seed, STREAM_CALIBRATE))
    return default_regimes(t_start, cfg.search.rates)


def cmd_search(cfg: RunConfig, out_dir: Path, resume: bool = False) -> StageResult:
    with _timed("search", out_dir) as result:
        model = resolve_model(cfg, out_dir)
        write_model(model, out_dir / MODEL_FILE)
        rng = RandomSource(cfg.seed, STREAM_SEARCH)
        regimes = _campaign_regimes(cfg, model)
        checkpoint = out_dir / CHECKPOINT_FILE
        state = None
        if resume:
            if checkpoint.exists():
                state = resume_state(checkpoint, model, regimes, rng)
            else:
                logger.warning("no checkpoint at %s; starting a fresh campaign", checkpoint)
        budget = Budget(cfg.search.max_sweeps or None, cfg.search.max_seconds or None)
        saved = []

        def checkpoint_batch(progress):
            save_checkpoint(checkpoint, model, regimes, rng, progress)
            saved.append(progress.cycles_done)

        campaign = sa_campaign(
            model,
            regimes,
            cfg.search.cycles,
            rng,
            budget,
            workers=cfg.workers,
            batch_cycles=cfg.search.checkpoint_every,
            state=state,
            on_batch=checkpoint_batch,
        )
        registry = register_campaign(ValleyRegistry(), campaign, model, cfg.search.name, resolve_rbm(cfg, out_dir))
        registry.write_csv(out_dir / SEARCH_REGISTRY_FILE)
        cuts = sorted(set(cfg.search.cut_points) | {campaign.cycles_completed or 1})
        pd.DataFrame({"cut": cuts, "minima": campaign.counts_at(cuts)}).to_csv(
            out_dir / SEARCH_CUTS_FILE, index=False, lineterminator="\n"
        )
        if saved or state is not None:
            result.outputs.append(checkpoint)
        result.outputs += [out_dir / SEARCH_REGISTRY_FILE, out_dir / SEARCH_CUTS_FILE]
        result.summary = (
            f"search: {len(campaign.minima)} minima after {campaign.cycles_completed} cycles "
            f"x {len(regimes)} regimes ({campaign.sweeps_used} sweeps)"
        )
    if campaign.budget_exhausted:
        if checkpoint in result.outputs:
            hint = f"progress saved to {checkpoint}, rerun with --resume and a larger budget"
        else:
            hint = "no cycle fit in the budget and no checkpoint was written"
        raise ResourceCapError(
            f"campaign budget exhausted after {campaign.cycles_completed} of {cfg.search.cycles} cycles; {hint}"
        )
    return result


def run_sampler(spec: SamplerSpec, model: IsingModel, rng: RandomSource, workers: int = 1) -> SampleSet:
    if spec.kind == "ingest":
        samples = ingest_reads(spec.path, model.n)
        if samples.sampler_name != spec.name:
            logger.warning("sample file %s is labelled %r; registering it as %r", spec.path, samples.sampler_name, spec.name)
            samples = dataclasses.replace(samples, sampler_name=spec.name)
        return samples
    if spec.kind == "exhaustive":
        samples = sample_exhaustive(model, spec.name)
    elif spec.kind == "sa":
        t_start = spec.t_start or calibrate_t_start(model, rng.child(0))
        samples = sample_sa(model, spec.reads, Schedule.geometric(t_start, spec.rate), rng.child(1), name=spec.name, workers=workers)
    else:
        anneal = (
            read_anneal_table(spec.anneal_table)
            if spec.anneal_table
            else AnnealFunctions.linear(spec.a_start, spec.a_end, spec.b_start, spec.b_end)
        )
        samples = sample_sqa(
            model,
            spec.reads,
            anneal,
            spec.trotter_slices,
            spec.sweeps,
            spec.base_temperature or 0.1 * model.energy_scale(),
            rng.child(1),
            name=spec.name,
            read_slice=spec.read_slice,
            global_moves=spec.global_moves,
            workers=workers,
        )
    digest = config_digest([(f.name, str(getattr(spec, f.name))) for f in dataclasses.fields(spec)] + [("seed", str(rng.seed))])
    return dataclasses.replace(samples, metadata={**samples.metadata, "config_digest": digest})


def cmd_sample(cfg: RunConfig, out_dir: Path) -> StageResult:
    with _timed("sample", out_dir) as result:
        if not cfg.samplers:
            raise DataError("no samplers configured; add sampler.<name>.kind=... to the config")
        model = resolve_model(cfg, out_dir)
        root = RandomSource(cfg.seed, STREAM_SAMPLE)
        parts = []
        for spec in cfg.samplers:
            samples = run_sampler(spec, model, root.child(_stream_key(spec.name)), cfg.workers)
            path = out_dir / samples_file(spec.name)
            write_reads(samples, path)
            result.outputs.append(path)
            parts.append(f"{spec.name}={samples.distinct}/{samples.total_reads}")
        result.summary = f"sample: distinct/total reads {' '.join(parts)}"
    return result


def _warming_config(cfg: RunConfig) -> WarmingConfig:
    w = cfg.warming
    return WarmingConfig(
        chains=w.chains,
        jump_cap=w.jump_cap,
        ladder_factor=w.ladder_factor,
        t0_fraction=w.t0_fraction,
        max_rungs=w.max_rungs,
        threshold_multiplier=w.threshold_multiplier,
        dos_fraction=w.dos_fraction,
    )


def assemble_registry(cfg: RunConfig, model: IsingModel, out_dir: Path) -> ValleyRegistry:
    """Campaign valleys plus the valleys of every configured sampler's reads."""
    search_path = out_dir / SEARCH_REGISTRY_FILE
    registry = ValleyRegistry.read_csv(search_path) if search_path.exists() else ValleyRegistry()
    rbm = resolve_rbm(cfg, out_dir)
    for spec in cfg.samplers:
        path = _require(out_dir / samples_file(spec.name), "sample")
        register_sample(registry, ingest_reads(path, model.n), model, rbm)
    if not len(registry):
        raise DataError(f"nothing to characterize: no {SEARCH_REGISTRY_FILE} and no samplers configured")
    return registry


def cmd_characterize(cfg: RunConfig, out_dir: Path) -> StageResult:
    with _timed("characterize", out_dir) as result:
        model = resolve_model(cfg, out_dir)
        registry = assemble_registry(cfg, model, out_dir)
        targets = sorted(registry.keys(), key=lambda lm: (registry.get(lm).e_lm, lm.to_string()))
        if cfg.warming.max_valleys:
            targets = targets[: cfg.warming.max_valleys]
        warming = _warming_config(cfg)
        root = RandomSource(cfg.seed, STREAM_WARM)
        missing_fit = 0
        for number, lm in enumerate(targets, start=1):
            record = characterize_valley(model, lm, warming, root.child(zlib.crc32(lm.key)), cfg.workers)
            registry.attach(record)
            missing_fit += record.e_act is None
            logger.info("valley %d/%d %s: n_lv=%d e_act=%s", number, len(targets), lm.to_string(), record.n_lv, record.e_act)
        links = zero_energy_links(model, registry.keys(), cfg.warming.flat_link_limit)
        for lm, partners in links.items():
            registry.get(lm).flat_links = partners
        registry.write_csv(out_dir / VALLEYS_FILE)
        result.outputs.append(out_dir / VALLEYS_FILE)
        result.summary = (
            f"characterize: {len(targets)} of {len(registry)} valleys characterized, "
            f"{missing_fit} without an activation energy, {len(links)} with zero-energy links"
        )
    return result


def cmd_compare(cfg: RunConfig, out_dir: Path) -> StageResult:
    with _timed("compare", out_dir) as result:
        registry = ValleyRegistry.read_csv(_require(out_dir / VALLEYS_FILE, "characterize"))
        reference = cfg.compare.reference or (cfg.samplers[0].name if cfg.samplers else "")
        comparator = cfg.compare.comparator or cfg.search.name
        if not reference:
            raise DataError("compare needs compare.reference or at least one configured sampler")
        report = build_report(
            registry,
            reference,
            comparator,
            parameters=cfg.compare.parameters,
            bins=cfg.compare.bins,
            bucket_parameters=cfg.compare.buckets,
            bucket_count=cfg.compare.bucket_count,
            cut_points=cfg.search.cut_points if comparator == cfg.search.name else (),
            patterns=_training_patterns(cfg, out_dir),
        )
        result.outputs += write_report(report, out_dir / COMPARE_DIR)
        counts = report.partition.counts()
        missed = report.partition.missed_percentage
        result.summary = (
            f"compare {reference} vs {comparator}: {counts['a_only']} {reference}-only, {counts['both']} shared, "
            f"{counts['b_only']} {comparator}-only; missed "
            + (f"{100 * missed:.1f}%" if missed is not None else "n/a")
        )
    return result


def cmd_oracle(cfg: RunConfig, out_dir: Path) -> StageResult:
    with _timed("oracle", out_dir) as result:
        model = resolve_model(cfg, out_dir)
        landscape = enumerate_landscape(model, cfg.workers)
        landscape.write_dump(out_dir / LANDSCAPE_FILE)
        landscape.minima_frame().to_csv(
            out_dir / ORACLE_MINIMA_FILE, index=False, float_format="%.17g", lineterminator="\n"
        )
        result.outputs += [out_dir / LANDSCAPE_FILE, out_dir / ORACLE_MINIMA_FILE]
        result.summary = f"oracle: n={model.n}, {len(landscape.minima)} minima over {landscape.energies.size} states"
    return result


def demo_config(path: Optional[Path] = None) -> RunConfig:
    return load_config(path or DEMO_CONFIG)


def cmd_demo(cfg: RunConfig, out_dir: Path) -> List[StageResult]:
    """Train a small RBM and run every downstream stage on it."""
    results = [cmd_train(cfg, out_dir)]
    results.append(cmd_search(cfg, out_dir))
    results.append(cmd_sample(cfg, out_dir))
    results.append(cmd_characterize(cfg, out_dir))
    results.append(cmd_compare(cfg, out_dir))
    results.append(cmd_oracle(cfg, out_dir))
    return results


STAGES: Dict[str, Callable[[RunConfig, Path], StageResult]] = {
    "train": cmd_train,
    "search": cmd_search,
    "sample": cmd_sample,
    "characterize": cmd_characterize,
    "compare": cmd_compare,
    "oracle": cmd_oracle,
}


def data_outputs(out_dir: Path) -> Dict[str, bytes]:
    """Every data file of a run keyed by relative path; timing sidecars excluded."""
    return {
        str(p.relative_to(out_dir)): p.read_bytes()
        for p in sorted(out_dir.rglob("*"))
        if p.is_file() and not p.name.endswith(".timing.json")
    }


