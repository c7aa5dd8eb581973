# agrg/core/pipeline.py

"""
Stage driver: dataset synthesis, the three training stages, generation over a split,
evaluation and the ablation sweep.

Artifacts live under `paths.data_dir` (`train.agds`, `val.agds`, `test.agds`,
`manifest.json`) and `paths.out_dir` (`pretrain.agrg`, `heads.agrg`,
`decoder-<variant>.agrg`, per-stage CSV loss logs, generations and metrics).
Every artifact carries the config hash and the seed.
"""

import logging
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from humanfriendly import format_timespan

from agrg.config import RunConfig, StageConfig
from agrg.core.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from agrg.core.encoder import ENCODER_KINDS, PretrainModel, multilabel_scores, pretrain_epoch
from agrg.core.generation_task import (
    ReportGenerator, ReportModel, TextProjector, VariantConfig, conditioning_features, projector_input_dim,
    upstream_outputs,
)
from agrg.core.heads import MultiTaskModel, ThresholdVector, calibrate_thresholds, heads_epoch, multitask_scores, select_abnormal
from agrg.core.nn import parameter_digest
from agrg.core.optim import Adam, AdamW
from agrg.core.textgen import TextDecoder, Vocabulary, tokenize, train_decoder_step
from agrg.errors import ConfigError, FrozenParameterError, MissingPrerequisiteError
from agrg.evaluation.evaluate import MetricsReport, aggregate_runs, evaluate_records, format_table, write_metrics
from agrg.ingestion.common_utils import blas_thread_cap, iter_batches, make_rng
from agrg.ingestion.dataset_io import dataset_header, read_dataset, read_jsonl, write_dataset, write_json, write_jsonl
from agrg.ingestion.synth import LabelRegistry, SyntheticCase, split_dataset_from_config, template_corpus

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "heads", "decoder", "baseline")
SPLITS = ("train", "val", "test")
THRESHOLD_NAMES = {"pretrain": "multilabel", "heads": "multitask"}
SELECTION = "selection"
ABLATION_ROWS = {
    "baseline": "baseline",
    "multitask": "+multi-task",
    "expansion": "+embedding expansion",
    "full": "full",
}

PathLike = Union[str, Path]
Upstream = Union[PretrainModel, MultiTaskModel]

# ==============================================================================
# 1. PATHS & DATASET
# ==============================================================================

def registry_for(config: RunConfig) -> LabelRegistry:
    return LabelRegistry.default(config.dataset.k)


def split_path(config: RunConfig, split: str) -> Path:
    return Path(config.paths.data_dir) / f"{split}.agds"


def checkpoint_path(config: RunConfig, stage: str, variant: Optional[str] = None) -> Path:
    out_dir = Path(config.paths.out_dir)
    if stage in ("decoder", "baseline"):
        return out_dir / f"decoder-{variant or config.variant.name}.agrg"
    return out_dir / f"{stage}.agrg"


def loss_log_path(checkpoint: Path) -> Path:
    return checkpoint.with_name(f"{checkpoint.stem}-loss.csv")


def synthesize_splits(config: RunConfig) -> dict:
    """Writes the three split files and a manifest with counts and per-label positive rates."""
    data_dir = Path(config.paths.data_dir)
    registry = registry_for(config)
    splits = split_dataset_from_config(config.dataset)
    manifest = {
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "base_seed": config.dataset.base_seed,
        "k": config.dataset.k,
        "shape": list(config.dataset.shape),
        "labels": list(registry.names),
        "expected_positive_rate": config.dataset.p,
        "splits": {},
    }
    for name in SPLITS:
        collection = splits[name]
        positives = np.zeros(registry.k)

        def tally(cases):
            for case in cases:
                np.add(positives, case.labels, out=positives)
                yield case

        started = time.perf_counter()
        count = write_dataset(split_path(config, name), tally(collection), len(collection), registry.k,
                              tuple(config.dataset.shape), desc=f"synth {name}")
        rates = positives / count
        manifest["splits"][name] = {
            "file": f"{name}.agds",
            "count": count,
            "seeds": [collection.seeds.start, collection.seeds.stop],
            "positive_rate": dict(zip(registry.names, rates.round(6).tolist())),
        }
        logger.info(f"[Synth] wrote {count} cases to {name}.agds in {format_timespan(time.perf_counter() - started)}")
    write_json(data_dir / "manifest.json", manifest)
    return manifest


def load_split(config: RunConfig, split: str) -> List[SyntheticCase]:
    path = split_path(config, split)
    if not path.exists():
        raise MissingPrerequisiteError(f"dataset split {path} does not exist; run `synth` first")
    header = dataset_header(path)
    if header.k != config.dataset.k or tuple(header.shape) != tuple(config.dataset.shape):
        raise ConfigError(f"{path.name} holds K={header.k}, shape={header.shape}; config expects "
                          f"K={config.dataset.k}, shape={tuple(config.dataset.shape)}")
    return read_dataset(path)

# ==============================================================================
# 2. SHARED STAGE HELPERS
# ==============================================================================

def build_upstream(config: RunConfig, multitask: bool, rng: np.random.Generator) -> Upstream:
    if multitask:
        return MultiTaskModel(config.encoder, config.heads, config.dataset.k, rng)
    return PretrainModel(config.encoder, config.dataset.k, rng)


def _schedule(stage_config: StageConfig, lr: Optional[float], epochs: Optional[int]) -> StageConfig:
    update = {key: value for key, value in (("lr", lr), ("epochs", epochs)) if value is not None}
    if lr is not None and stage_config.head_lr is not None:
        update["head_lr"] = lr
    return stage_config.model_copy(update=update)


def _require_checkpoint(path: Path, config: RunConfig, force: bool, stage: str, prerequisite: str) -> Checkpoint:
    if not path.exists():
        raise MissingPrerequisiteError(f"stage '{stage}' needs {path.name}; run `train --stage {prerequisite}` first")
    return load_checkpoint(path, config.config_hash(), force)


def _resume(path: Optional[PathLike], config: RunConfig, force: bool, stage: str) -> Optional[Checkpoint]:
    if path is None:
        return None
    checkpoint = load_checkpoint(path, config.config_hash(), force)
    if checkpoint.metadata.get("stage") != stage:
        raise ConfigError(f"cannot resume stage '{stage}' from a '{checkpoint.metadata.get('stage')}' checkpoint")
    logger.info(f"[Train] resuming '{stage}' after epoch {checkpoint.metadata.get('epochs_done', 0)}")
    return checkpoint


def _run_epochs(tag: str, start: int, epochs: int, epoch_fn: Callable[[int], float]) -> List[dict]:
    rows = []
    for epoch in range(start, start + epochs):
        began = time.perf_counter()
        loss = epoch_fn(epoch)
        logger.info(f"[{tag}] epoch {epoch + 1}/{start + epochs} loss={loss:.4f} "
                    f"({format_timespan(time.perf_counter() - began)})")
        rows.append({"epoch": epoch + 1, "loss": loss})
    return rows


def _write_loss_log(path: Path, rows: List[dict], resumed: bool) -> None:
    frame = pd.DataFrame(rows, columns=["epoch", "loss"])
    if resumed and path.exists():
        frame = pd.concat([pd.read_csv(path), frame], ignore_index=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.8f")


def _metadata(config: RunConfig, stage: str, epochs_done: int, schedule: StageConfig, **extra) -> dict:
    metadata = {
        "stage": stage,
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
        "epochs_done": epochs_done,
        "schedule": schedule.model_dump(),
    }
    metadata["config"].pop("paths", None)
    metadata.update(extra)
    return metadata


def _calibrate(scores: np.ndarray, cases: Sequence[SyntheticCase], registry: LabelRegistry) -> ThresholdVector:
    labels = np.stack([case.labels for case in cases]).astype(int)
    thresholds = calibrate_thresholds(scores, labels, registry.names)
    logger.info(f"[Thresholds] calibrated on {len(cases)} validation cases, "
                f"mean validation F1 {float(np.mean(thresholds.f1)):.4f}")
    return thresholds

# ==============================================================================
# 3. STAGES
# ==============================================================================

def _pretrain_stage(config: RunConfig, schedule: StageConfig, resume: Optional[Checkpoint]) -> Path:
    registry = registry_for(config)
    train, val = load_split(config, "train"), load_split(config, "val")
    model = PretrainModel(config.encoder, registry.k, make_rng(config.seed, "init", "pretrain"))

    start, state = 0, None
    if resume is not None:
        resume.load_module("upstream", model)
        state = resume.optimizer_state("pretrain")
        start = int(resume.metadata.get("epochs_done", 0))
    optimizer = Adam(model.named_parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay, state=state)
    optimizer.state.lr = schedule.lr

    rows = _run_epochs("Pretrain", start, schedule.epochs, lambda epoch: pretrain_epoch(
        train, model, optimizer, schedule.batch_size, seed=config.seed, epoch=epoch))
    model.snap_float32()
    thresholds = _calibrate(multilabel_scores(val, model), val, registry)

    checkpoint = Checkpoint(config.config_hash(), _metadata(config, "pretrain", start + schedule.epochs, schedule))
    checkpoint.add_module("upstream", model)
    checkpoint.add_optimizer("pretrain", optimizer)
    checkpoint.thresholds[THRESHOLD_NAMES["pretrain"]] = thresholds
    path = save_checkpoint(checkpoint_path(config, "pretrain"), checkpoint)
    _write_loss_log(loss_log_path(path), rows, resume is not None)
    return path


def _heads_stage(config: RunConfig, schedule: StageConfig, resume: Optional[Checkpoint], force: bool) -> Path:
    registry = registry_for(config)
    model = MultiTaskModel(config.encoder, config.heads, registry.k, make_rng(config.seed, "init", "heads"))

    start = 0
    trunk_state = head_state = None
    if resume is not None:
        resume.load_module("upstream", model)
        trunk_state, head_state = resume.optimizer_state("trunk"), resume.optimizer_state("heads")
        start = int(resume.metadata.get("epochs_done", 0))
    else:
        pretrained = _require_checkpoint(checkpoint_path(config, "pretrain"), config, force, "heads", "pretrain")
        pretrained.load_module("upstream.encoder", model.encoder)
    train, val = load_split(config, "train"), load_split(config, "val")

    head_params = [item for label in range(registry.k) for item in model.head_parameters(label)]
    trunk_optimizer = Adam(model.trunk_parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay,
                           state=trunk_state)
    head_lr = schedule.head_lr if schedule.head_lr is not None else schedule.lr
    head_optimizer = Adam(head_params, lr=head_lr, weight_decay=schedule.weight_decay, state=head_state)
    trunk_optimizer.state.lr, head_optimizer.state.lr = schedule.lr, head_lr

    rows = _run_epochs("Heads", start, schedule.epochs, lambda epoch: heads_epoch(
        train, model, trunk_optimizer, head_optimizer, schedule.batch_size, seed=config.seed, epoch=epoch))
    model.snap_float32()
    thresholds = _calibrate(multitask_scores(val, model), val, registry)

    checkpoint = Checkpoint(config.config_hash(), _metadata(config, "heads", start + schedule.epochs, schedule))
    checkpoint.add_module("upstream", model)
    checkpoint.add_optimizer("trunk", trunk_optimizer)
    checkpoint.add_optimizer("heads", head_optimizer)
    checkpoint.thresholds[THRESHOLD_NAMES["heads"]] = thresholds
    path = save_checkpoint(checkpoint_path(config, "heads"), checkpoint)
    _write_loss_log(loss_log_path(path), rows, resume is not None)
    return path


def decoder_vocabulary(registry: LabelRegistry) -> Vocabulary:
    return Vocabulary.build(template_corpus(registry))


def training_pairs(cases: Sequence[SyntheticCase], upstream: Upstream, thresholds: ThresholdVector,
                   variant: VariantConfig, vocab: Vocabulary, batch_size: int = 16) -> List[Tuple[np.ndarray, List[int]]]:
    """
    (projector input, sentence ids) for every true-positive selection of the frozen
    upstream: only labels that are both above threshold and present in the ground truth.
    """
    pairs = []
    for batch in iter_batches(list(cases), batch_size):
        volumes = np.stack([case.volume for case in batch]).astype(np.float64)
        outputs = upstream_outputs(upstream, volumes)
        for row, case in enumerate(batch):
            selected = select_abnormal(outputs.scores[row], thresholds.values, mode="training", labels=case.labels)
            for label in selected:
                features = conditioning_features(variant, outputs, row, label)
                pairs.append((features, tokenize(case.sentences[label], vocab)))
    return pairs


def _decoder_stage(config: RunConfig, variant: VariantConfig, schedule: StageConfig,
                   resume: Optional[Checkpoint], force: bool) -> Path:
    registry = registry_for(config)
    upstream_stage = variant.upstream_stage
    source = _require_checkpoint(checkpoint_path(config, upstream_stage), config, force, "decoder", upstream_stage)
    rng = make_rng(config.seed, "init", "decoder", variant.name)
    upstream = build_upstream(config, variant.multitask, rng)
    source.load_module("upstream", upstream)
    thresholds = source.thresholds.get(THRESHOLD_NAMES[upstream_stage])
    if thresholds is None:
        raise MissingPrerequisiteError(f"{upstream_stage}.agrg carries no calibrated thresholds")
    upstream.freeze()
    frozen_digest = parameter_digest(upstream.named_parameters())

    vocab = decoder_vocabulary(registry)
    projector = TextProjector(projector_input_dim(variant, registry.k, config.encoder.d_h, config.heads.d_i),
                              config.decoder.d_t, rng)
    decoder = TextDecoder(config.decoder, len(vocab), rng)
    start, state = 0, None
    if resume is not None:
        if resume.metadata.get("variant") != variant.name:
            raise ConfigError(f"resume checkpoint was trained for variant '{resume.metadata.get('variant')}'")
        resume.load_module("projector", projector)
        resume.load_module("decoder", decoder)
        state = resume.optimizer_state("decoder")
        start = int(resume.metadata.get("epochs_done", 0))

    pairs = training_pairs(load_split(config, "train"), upstream, thresholds, variant, vocab)
    if not pairs:
        raise ConfigError("the upstream selects no true positives on the training split; nothing to train on")
    logger.info(f"[Decoder] {len(pairs)} sentence pairs for the {variant.name} variant")

    trainable = ([(f"projector.{name}", p) for name, p in projector.named_parameters()]
                 + [(f"decoder.{name}", p) for name, p in decoder.named_parameters()])
    optimizer = AdamW(trainable, lr=schedule.lr, weight_decay=schedule.weight_decay, state=state)
    optimizer.state.lr = schedule.lr
    frozen = upstream.parameters()

    def epoch_fn(epoch: int) -> float:
        order = make_rng(config.seed, "decoder-shuffle", variant.name, epoch).permutation(len(pairs))
        total = 0.0
        for indices in iter_batches(order, schedule.batch_size):
            batch = [pairs[int(i)] for i in indices]
            total += train_decoder_step(decoder, projector, batch, optimizer, frozen=frozen) * len(batch)
        return total / len(pairs)

    rows = _run_epochs("Decoder", start, schedule.epochs, epoch_fn)
    projector.snap_float32()
    decoder.snap_float32()
    digest = parameter_digest(upstream.named_parameters())
    if digest != frozen_digest:
        raise FrozenParameterError("upstream parameters changed during decoder training")
    logger.info(f"[Decoder] upstream digest unchanged: {digest[:16]}")

    checkpoint = Checkpoint(config.config_hash(), _metadata(
        config, "decoder", start + schedule.epochs, schedule, variant=variant.name,
        upstream_stage=upstream_stage, upstream_digest=digest, decoder_trained=True))
    checkpoint.add_module("upstream", upstream)
    checkpoint.add_module("projector", projector)
    checkpoint.add_module("decoder", decoder)
    checkpoint.add_optimizer("decoder", optimizer)
    checkpoint.thresholds[SELECTION] = thresholds
    checkpoint.vocab = vocab
    path = save_checkpoint(checkpoint_path(config, "decoder", variant.name), checkpoint)
    _write_loss_log(loss_log_path(path), rows, resume is not None)
    return path


def run_stage(stage: str, config: RunConfig, resume: Optional[PathLike] = None, force: bool = False,
              lr: Optional[float] = None, epochs: Optional[int] = None) -> Path:
    """
    Runs one training stage and returns the checkpoint it wrote.

    `lr` / `epochs` override the configured schedule for this run only; they are
    recorded in the checkpoint metadata and do not change the config hash.
    `baseline` is the decoder stage with both variant flags off.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage '{stage}', expected one of {STAGES}")
    began = time.perf_counter()
    variant = VariantConfig.named("baseline") if stage == "baseline" else config.variant
    key = "decoder" if stage == "baseline" else stage
    schedule = _schedule(getattr(config.training, key), lr, epochs)
    logger.info(f"[Train] stage '{stage}' (config {config.config_hash()[:12]}, seed {config.seed})")

    with blas_thread_cap(config.threads):
        checkpoint = _resume(resume, config, force, key)
        if key == "pretrain":
            path = _pretrain_stage(config, schedule, checkpoint)
        elif key == "heads":
            path = _heads_stage(config, schedule, checkpoint, force)
        else:
            path = _decoder_stage(config, variant, schedule, checkpoint, force)

    logger.info(f"[Train] ✓ stage '{stage}' done in {format_timespan(time.perf_counter() - began)} -> {path}")
    return path

# ==============================================================================
# 4. GENERATION & EVALUATION
# ==============================================================================

def load_report_model(path: PathLike, config: RunConfig, force: bool = False) -> ReportModel:
    checkpoint = load_checkpoint(path, config.config_hash(), force)
    if not checkpoint.has_prefix("decoder") or checkpoint.vocab is None:
        raise MissingPrerequisiteError(f"{Path(path).name} carries no trained decoder; "
                                       f"run `train --stage decoder` first")
    registry = registry_for(config)
    variant = VariantConfig.named(checkpoint.metadata.get("variant", config.variant.name))
    rng = make_rng(config.seed, "init", "decoder", variant.name)
    upstream = build_upstream(config, variant.multitask, rng).freeze()
    projector = TextProjector(projector_input_dim(variant, registry.k, config.encoder.d_h, config.heads.d_i),
                              config.decoder.d_t, rng)
    decoder = TextDecoder(config.decoder, len(checkpoint.vocab), rng)
    for prefix, module in (("upstream", upstream), ("projector", projector), ("decoder", decoder)):
        checkpoint.load_module(prefix, module)
    return ReportModel(registry=registry, variant=variant, upstream=upstream, projector=projector,
                       decoder=decoder, vocab=checkpoint.vocab, decoder_config=config.decoder,
                       thresholds=checkpoint.thresholds.get(SELECTION),
                       decoder_trained=bool(checkpoint.metadata.get("decoder_trained")),
                       metadata=checkpoint.metadata)


def generate_split(config: RunConfig, checkpoint: PathLike, split: str, output: Optional[PathLike] = None,
                   threads: Optional[int] = None, force: bool = False) -> Path:
    """Writes one JSON-lines generation record per case of `split`."""
    began = time.perf_counter()
    model = load_report_model(checkpoint, config, force)
    cases = load_split(config, split)
    threads = threads or config.threads
    with blas_thread_cap(threads):
        records = ReportGenerator(model, threads=threads).generate_for_cases(cases)
    stamp = {"config_hash": config.config_hash(), "seed": config.seed, "variant": model.variant.name}
    output = Path(output) if output else Path(config.paths.out_dir) / f"generations-{split}.jsonl"
    write_jsonl(output, ({**record, **stamp} for record in records))
    logger.info(f"[Generate] ✓ {len(records)} {split} reports -> {output} "
                f"({format_timespan(time.perf_counter() - began)})")
    return output


def evaluate_split(config: RunConfig, generations: Sequence[PathLike], split: str,
                   out_dir: Optional[PathLike] = None) -> dict:
    """Scores one or more generation files (one per run) and writes metrics.json / metrics.txt."""
    if not generations:
        raise ConfigError("at least one generation file is needed")
    references = load_split(config, split)
    registry = registry_for(config)
    reports = []
    for path in generations:
        if not Path(path).exists():
            raise MissingPrerequisiteError(f"generation file {path} does not exist; run `generate` first")
        reports.append(evaluate_records(read_jsonl(path), references, registry,
                                        metadata={"generations": str(path), "split": split}))
    label = reports[0].metadata.get("variant", "run")
    return write_metrics(out_dir or config.paths.out_dir, reports, label=label)

# ==============================================================================
# 5. ABLATION
# ==============================================================================

def _write_ablation(out_dir: Path, results: Dict[str, List[MetricsReport]], seeds: Sequence[int],
                    encoders: Sequence[str]) -> dict:
    finished = {row: reports for row, reports in results.items() if reports}
    rows = {row: aggregate_runs(reports) for row, reports in finished.items()}
    payload = {
        "seeds": list(seeds),
        "encoders": list(encoders),
        "rows": rows,
        "runs": {row: [report.model_dump() for report in reports] for row, reports in finished.items()},
    }
    write_json(out_dir / "ablation.json", payload)
    (out_dir / "ablation.txt").write_text(format_table(rows), encoding="utf-8")
    return payload


def ablation_row(variant: str, kind: str, sweep: bool) -> str:
    """Table row name; the encoder kind is appended only when several kinds are swept."""
    return f"{ABLATION_ROWS[variant]} [{kind}]" if sweep else ABLATION_ROWS[variant]


def run_ablation(config: RunConfig, seeds: Optional[Sequence[int]] = None, force: bool = False,
                 encoders: Optional[Sequence[str]] = None) -> dict:
    """
    Trains and evaluates the four decoder variants per seed and encoder kind on the test split.

    `encoders` defaults to `ablation.encoders`, or to the configured encoder kind when
    that is empty. The upstream stages run once per seed and kind and are shared by the
    variants. Partial rows are written after every finished variant, so a failure keeps
    what is done.
    """
    seeds = list(seeds if seeds is not None else config.ablation.seeds)
    if not seeds:
        raise ConfigError("the ablation needs at least one seed")
    encoders = list(encoders or config.ablation.encoders or [config.encoder.kind])
    unknown = sorted(set(encoders) - set(ENCODER_KINDS))
    if unknown:
        raise ConfigError(f"unknown encoder kinds {unknown}; expected some of {list(ENCODER_KINDS)}")
    sweep = len(encoders) > 1
    out_root = Path(config.paths.out_dir)
    references = load_split(config, "test")
    registry = registry_for(config)
    results: Dict[str, List[MetricsReport]] = {
        ablation_row(name, kind, sweep): [] for kind in encoders for name in ABLATION_ROWS
    }
    payload: dict = {}

    for seed in seeds:
        for kind in encoders:
            run_dir = out_root / f"seed-{seed}" / kind if sweep else out_root / f"seed-{seed}"
            run_config = config.updated(seed=seed, encoder={"kind": kind}, paths={"out_dir": str(run_dir)})
            run_stage("pretrain", run_config, force=force)
            run_stage("heads", run_config, force=force)
            for name in ABLATION_ROWS:
                variant_config = run_config.updated(variant=VariantConfig.named(name).model_dump())
                checkpoint = run_stage("decoder", variant_config, force=force)
                generations = generate_split(variant_config, checkpoint, "test",
                                             output=run_dir / f"generations-test-{name}.jsonl", force=force)
                row = ablation_row(name, kind, sweep)
                results[row].append(evaluate_records(read_jsonl(generations), references, registry,
                                                     metadata={"generations": str(generations), "split": "test"}))
                payload = _write_ablation(out_root, results, seeds, encoders)
                logger.info(f"[Ablation] seed {seed} {kind} variant {name}: CE F1={results[row][-1].f1:.4f}")

    logger.info(f"[Ablation] ✓ {len(seeds)} seeds x {len(encoders)} encoders x {len(ABLATION_ROWS)} variants "
                f"-> {out_root / 'ablation.txt'}")
    return payload
