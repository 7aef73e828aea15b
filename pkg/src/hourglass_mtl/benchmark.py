"""Desk-scale task ablation on the synthetic-shapes benchmark.

For each seed a fresh dataset is drawn and two models are trained with the
same seed: one on segmentation alone and one on all four tasks. Both are
scored on the held-out split for mIoU, latent clustering quality and the
trimap boundary error. Run ``python3 -m hourglass_mtl.benchmark`` to print
a per-seed table.
"""

from __future__ import annotations

import argparse
import time
from dataclasses import dataclass, field

from .shapes import synth_shapes
from .trainer import TrainConfig, evaluate_split, prepare_data, train

SINGLE = ("S",)
MULTI = ("E", "S", "C", "D")


@dataclass(frozen=True)
class AblationProtocol:
    """Benchmark settings; learning rates are chosen per arm on development seeds."""

    seeds: tuple = (0, 1, 2, 3, 4)
    count: int = 250  # 200 train / 50 test with the default split
    size: int = 64
    classes: int = 4
    iterations: int = 1500
    crop: int = 48
    base_width: int = 8
    lr_single: float = 2e-4
    lr_multi: float = 8e-4
    clip_norm: float = 100.0
    prior_bias: bool = True
    widths: tuple = (1, 2, 4, 8, 16, 32)

    def config(self, tasks, seed: int) -> TrainConfig:
        lr = self.lr_single if tuple(tasks) == SINGLE else self.lr_multi
        return TrainConfig(
            tasks=tuple(tasks), lr=lr, iterations=self.iterations, seed=seed,
            crop=self.crop, base_width=self.base_width, clip_norm=self.clip_norm, prior_bias=self.prior_bias,
        )


@dataclass
class ArmResult:
    tasks: tuple
    seed: int
    miou: float
    ssi: float
    dbi: float
    chi: float
    trimap: list  # (width, error %) pairs
    seconds: float

    def trimap_error(self, width) -> float:
        return dict(self.trimap)[width]


@dataclass
class SeedResult:
    seed: int
    single: ArmResult
    multi: ArmResult
    test_labels: list = field(default_factory=list, repr=False)


def run_arm(samples, tasks, seed: int, protocol: AblationProtocol) -> ArmResult:
    cfg = protocol.config(tasks, seed)
    start = time.perf_counter()
    data = prepare_data(samples, cfg)
    result = train(cfg, data)
    test = [samples[i] for i in data.test_idx]
    report, _ = evaluate_split(result.params, test, protocol.widths, capture_latent=True)
    lm = report.latent
    return ArmResult(cfg.tasks, seed, report.seg.miou, lm.ssi, lm.dbi, lm.chi, report.trimap,
                     time.perf_counter() - start)


def run_seed(seed: int, protocol: AblationProtocol = AblationProtocol()) -> SeedResult:
    samples = synth_shapes(seed, protocol.count, protocol.size, protocol.classes)
    single = run_arm(samples, SINGLE, seed, protocol)
    multi = run_arm(samples, MULTI, seed, protocol)
    test = [s.labels for s in samples[int(round(0.8 * len(samples))):]]
    return SeedResult(seed, single, multi, test)


def run_ablation(protocol: AblationProtocol = AblationProtocol(), on_seed=None) -> list[SeedResult]:
    results = []
    for seed in protocol.seeds:
        res = run_seed(seed, protocol)
        results.append(res)
        if on_seed:
            on_seed(res)
    return results


def format_seed(res: SeedResult) -> str:
    rows = []
    for arm in (res.single, res.multi):
        errs = " ".join(f"{e:6.2f}" for _, e in arm.trimap)
        rows.append(
            f"seed {res.seed} {''.join(arm.tasks):>4}  mIoU {arm.miou:.4f}  SSI {arm.ssi:+.4f}  "
            f"DBI {arm.dbi:.3f}  trimap% {errs}  {arm.seconds:.0f}s"
        )
    return "\n".join(rows)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="segmentation-only vs four-task ablation")
    parser.add_argument("--seeds", default="0,1,2,3,4")
    parser.add_argument("--iterations", type=int, default=AblationProtocol.iterations)
    args = parser.parse_args(argv)
    protocol = AblationProtocol(seeds=tuple(int(s) for s in args.seeds.split(",")), iterations=args.iterations)
    run_ablation(protocol, on_seed=lambda r: print(format_seed(r), flush=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
