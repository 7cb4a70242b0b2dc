"""Synthetic benchmark suites and the shared train/evaluate recipe for ablations.

Every mode starts from the same single-frame detector (pretrained on the
training clips) and is then fine-tuned end to end in its own mode, so the
ablation compares aggregation schemes rather than lucky initialisations.
"""

from __future__ import annotations

from .aggregation import FlowSource, InferenceResult, infer_video
from .config import AggregationConfig, EvalConfig, PipelineConfig
from .errors import ConfigError
from .evaluation import SeqNmsConfig, evaluate_map, seq_nms
from .synthetic import Dataset, dataset_from_video, generate, make_scene
from .toy import Model
from .training import train

# roughly the slow/medium/fast proportions of real video benchmarks
TRAIN_MIX = {"slow": 8, "medium": 7, "fast": 5}
TRAIN_SEED_BASE = 1000
SUITE_SEEDS = {"fast": 0, "slow": 100, "medium": 200}
SUITE_SIZE = 10
PRETRAIN_ITERATIONS = 3000
FINETUNE_ITERATIONS = 3000
FEATURE_WIDTHS = [16, 32, 32]
FEATURE_STRIDES = [2, 2, 1]


def benchmark_config(mode: str = "fgfa", iterations: int = FINETUNE_ITERATIONS, seed: int = 0) -> PipelineConfig:
    """Default config with the deeper benchmark feature net."""
    cfg = PipelineConfig()
    cfg.model.feature_widths = list(FEATURE_WIDTHS)
    cfg.model.feature_strides = list(FEATURE_STRIDES)
    cfg.train.mode = mode
    cfg.train.iterations = iterations
    cfg.train.seed = seed
    cfg.aggregation.mode = mode
    return cfg


def training_clips(mix: dict | None = None) -> list[Dataset]:
    mix = TRAIN_MIX if mix is None else mix
    out = []
    for gi, (group, n) in enumerate(mix.items()):
        for s in range(n):
            out.append(dataset_from_video(generate(make_scene(group, TRAIN_SEED_BASE + 50 * gi + s))))
    return out


def suite(group: str, n: int = SUITE_SIZE, seed: int | None = None) -> list[Dataset]:
    """``n`` clips whose sprites all fall in motion ``group``."""
    if group not in SUITE_SEEDS and seed is None:
        raise ConfigError(f"unknown suite '{group}'")
    base = SUITE_SEEDS[group] if seed is None else seed
    return [dataset_from_video(generate(make_scene(group, base + s))) for s in range(n)]


def mixed_suite(n: int = SUITE_SIZE) -> list[Dataset]:
    return suite("fast", n) + suite("slow", n) + suite("medium", n)


def pretrain(clips, iterations: int = PRETRAIN_ITERATIONS, seed: int = 0) -> Model:
    return train(clips, benchmark_config("single", iterations, seed)).model


def finetune(base: Model, clips, mode: str, iterations: int = FINETUNE_ITERATIONS, seed: int = 0,
             k_train: int | None = None) -> Model:
    cfg = benchmark_config(mode, iterations, seed)
    if k_train is not None:
        cfg.train.k_train = k_train
    return train(clips, cfg, model=base.copy()).model


def run_inference(model: Model, dataset: Dataset, agg: AggregationConfig) -> InferenceResult:
    flows = FlowSource.from_dataset(dataset, model.feature.stride, agg.flow_noise_std, agg.flow_noise_seed)
    return infer_video(dataset.frames, model, agg, flows)


def evaluate(model: Model, datasets, mode: str, k: int = 10, use_seq_nms: bool = False,
             eval_cfg: EvalConfig | None = None) -> dict:
    """Run inference in ``mode`` with radius ``k`` over ``datasets`` and score the detections."""
    eval_cfg = eval_cfg or EvalConfig()
    agg = AggregationConfig(k_infer=k, mode=mode)
    videos = []
    for ds in datasets:
        per_frame = run_inference(model, ds, agg).detections
        if use_seq_nms:
            per_frame = seq_nms(per_frame, SeqNmsConfig(eval_cfg.seq_nms_link_iou, eval_cfg.seq_nms_suppress_iou))
        videos.append(([d for f in per_frame for d in f], ds.tracks))
    return evaluate_map(videos, eval_cfg, model.head.num_classes)
