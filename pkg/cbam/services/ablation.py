# cbam/services/ablation.py
"""
Ablation matrix runner: train one net per (variant, seed) and tabulate the results.

Report CSV columns: variant, params, final_train_loss, val_top1_err, seconds, seed,
val_top5_err. Rows keep request order (variants outer, seeds inner) regardless of how
many worker threads ran them.
"""
import dataclasses
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import pandas as pd
from django.conf import settings

from cbam.exceptions import ConfigError
from cbam.services.attention import Arrangement, CbamVariant, PoolingMode, SpatialDescriptor
from cbam.services.data import Dataset, split_train_val
from cbam.services.serialization import read_json, write_json, write_text
from cbam.services.training import TrainConfig, evaluate, train
from cbam.services.zoo import AttentionKind, TinyNetSpec, count_params, init_params, spec_param_count

COLUMNS = ["variant", "params", "final_train_loss", "val_top1_err", "seconds", "seed", "val_top5_err"]


@dataclass(frozen=True)
class AblationVariant:
    name: str
    attention: AttentionKind = AttentionKind.NONE
    cbam: Optional[CbamVariant] = None
    reduction_ratio: int = 16

    def __post_init__(self):
        object.__setattr__(self, "attention", AttentionKind(self.attention))
        if (self.attention is AttentionKind.CBAM) != (self.cbam is not None):
            raise ConfigError(f"variant {self.name!r}: cbam settings are required exactly for attention 'cbam'")

    @classmethod
    def from_dict(cls, data: dict) -> "AblationVariant":
        data = dict(data)
        name = data.pop("name", None)
        try:
            attention = AttentionKind(data.pop("attention", "cbam"))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if attention is AttentionKind.CBAM:
            cbam = CbamVariant.from_dict(data)
            return cls(name=name or cbam.label(), attention=attention, cbam=cbam,
                       reduction_ratio=cbam.reduction_ratio)
        r = data.pop("reduction_ratio", settings.CBAM_REDUCTION_RATIO)
        if data:
            raise ConfigError(f"unknown keys for a {attention.value!r} variant: {sorted(data)}")
        return cls(name=name or attention.value, attention=attention, reduction_ratio=r)

    def to_dict(self) -> dict:
        out = {"name": self.name, "attention": self.attention.value}
        if self.cbam is not None:
            out.update(self.cbam.to_dict())
        else:
            out["reduction_ratio"] = self.reduction_ratio
        return out

    def apply(self, arch: TinyNetSpec) -> TinyNetSpec:
        return arch.with_attention(self.attention, self.cbam, self.reduction_ratio)


# --- Standard matrices ------------------------------------------------------
def _cbam(name, **kwargs) -> AblationVariant:
    kwargs.setdefault("reduction_ratio", settings.CBAM_REDUCTION_RATIO)
    return AblationVariant(name=name, attention=AttentionKind.CBAM, cbam=CbamVariant(**kwargs),
                           reduction_ratio=kwargs["reduction_ratio"])


def standard_matrix(name: str) -> list:
    """
    channel:     baseline, SE (avg), max-only, avg+max; channel attention alone
    spatial:     avg+max channel attention + {channel_pool, one_by_one} × k {3, 7}
    arrangement: channel→spatial, spatial→channel, parallel
    all:         the union, first occurrence kept
    """
    r = settings.CBAM_REDUCTION_RATIO
    channel = [
        AblationVariant("baseline"),
        AblationVariant("se", AttentionKind.SE, reduction_ratio=r),
        _cbam("channel_max", arrangement=Arrangement.CHANNEL_ONLY, channel_pooling=PoolingMode.MAX_ONLY),
        _cbam("channel_avg_max", arrangement=Arrangement.CHANNEL_ONLY, channel_pooling=PoolingMode.AVG_AND_MAX),
    ]
    spatial = [
        _cbam(f"spatial_{d.value}_k{k}", spatial_descriptor=d, kernel_size=k)
        for d in (SpatialDescriptor.ONE_BY_ONE, SpatialDescriptor.CHANNEL_POOL) for k in (3, 7)
    ]
    arrangement = [
        _cbam(f"arrangement_{a.value}", arrangement=a)
        for a in (Arrangement.CHANNEL_THEN_SPATIAL, Arrangement.SPATIAL_THEN_CHANNEL, Arrangement.PARALLEL)
    ]
    matrices = {"channel": channel, "spatial": spatial, "arrangement": arrangement}
    if name == "all":
        seen, out = set(), []
        for variant in channel + spatial + arrangement:
            key = (variant.attention, variant.cbam, variant.reduction_ratio)
            if key not in seen:
                seen.add(key)
                out.append(variant)
        return out
    if name not in matrices:
        raise ConfigError(f"unknown matrix {name!r}; choose from channel, spatial, arrangement, all")
    return matrices[name]


def load_matrix(source: str) -> list:
    """A standard matrix name, or a JSON file holding a list of variants (or {"variants": [...]})."""
    if source in ("channel", "spatial", "arrangement", "all"):
        return standard_matrix(source)
    payload = read_json(source)
    if isinstance(payload, dict):
        payload = payload.get("variants")
    if not isinstance(payload, list) or not payload:
        raise ConfigError(f"{source}: expected a non-empty list of variants")
    variants = [AblationVariant.from_dict(entry) for entry in payload]
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ConfigError(f"{source}: variant names must be unique")
    return variants


# --- Report -----------------------------------------------------------------
@dataclass(frozen=True)
class AblationRow:
    variant: str
    params: int
    final_train_loss: float
    val_top1_err: float
    seconds: float
    seed: int
    val_top5_err: float = 0.0


@dataclass
class AblationReport:
    rows: list = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([dataclasses.asdict(row) for row in self.rows], columns=COLUMNS)

    def to_csv(self) -> str:
        return self.to_frame().to_csv(index=False, float_format="%.6f", lineterminator="\n")

    def to_records(self) -> list:
        return [dataclasses.asdict(row) for row in self.rows]

    def write(self, csv_path, json_path=None):
        write_text(csv_path, self.to_csv())
        if json_path is not None:
            write_json(json_path, self.to_records())

    def summary(self) -> pd.DataFrame:
        """Per-variant seed means and standard deviations, in request order."""
        frame = self.to_frame()
        grouped = frame.groupby("variant", sort=False)
        out = grouped.agg(
            params=("params", "first"),
            seeds=("seed", "count"),
            mean_val_top1_err=("val_top1_err", "mean"),
            std_val_top1_err=("val_top1_err", "std"),
            mean_final_train_loss=("final_train_loss", "mean"),
        ).reset_index()
        return out.fillna({"std_val_top1_err": 0.0})

    def per_seed(self, variant: str) -> list:
        return [row.val_top1_err for row in self.rows if row.variant == variant]


@dataclass(frozen=True)
class OrderingCheck:
    better: str
    worse: str
    better_mean: float
    worse_mean: float
    passed: bool
    better_per_seed: tuple = ()
    worse_per_seed: tuple = ()

    def to_dict(self) -> dict:
        out = {
            "claim": f"{self.better} <= {self.worse}",
            "better_mean_val_top1_err": self.better_mean,
            "worse_mean_val_top1_err": self.worse_mean,
            "passed": self.passed,
        }
        if not self.passed:
            out["per_seed"] = {self.better: list(self.better_per_seed), self.worse: list(self.worse_per_seed)}
        return out


def ordering_check(report: AblationReport, pairs=None) -> list:
    """
    Compare seed-mean val top-1 error for each (better, worse) pair present in the report.
    Defaults: the full CBAM variant against the baseline, avg+max against SE.
    """
    summary = report.summary().set_index("variant")
    if pairs is None:
        cbam_full = next((n for n in ("arrangement_channel_then_spatial", "spatial_channel_pool_k7")
                          if n in summary.index), None)
        pairs = [(cbam_full, "baseline"), ("channel_avg_max", "se")]
    checks = []
    for better, worse in pairs:
        if better not in summary.index or worse not in summary.index:
            continue
        b = float(summary.loc[better, "mean_val_top1_err"])
        w = float(summary.loc[worse, "mean_val_top1_err"])
        checks.append(OrderingCheck(
            better=better, worse=worse, better_mean=b, worse_mean=w, passed=b <= w,
            better_per_seed=tuple(report.per_seed(better)), worse_per_seed=tuple(report.per_seed(worse)),
        ))
    return checks


# --- Runner -----------------------------------------------------------------
def _run_one(variant: AblationVariant, arch: TinyNetSpec, train_data: Dataset, val_data: Dataset,
             cfg: TrainConfig, seed: int, clock: Optional[Callable[[], float]]) -> AblationRow:
    spec = variant.apply(arch)
    params = init_params(spec, seed)
    started = clock() if clock else 0.0
    result = train(spec, params, train_data, TrainConfig(**{**cfg.to_dict(), "seed": seed}))
    scores = evaluate(spec, result.params, val_data)
    seconds = clock() - started if clock else 0.0
    return AblationRow(
        variant=variant.name,
        params=count_params(result.params),
        final_train_loss=result.final_train_loss,
        val_top1_err=scores.top1,
        seconds=seconds,
        seed=seed,
        val_top5_err=scores.top5,
    )


def run_ablation(variants: list, data: Dataset, cfg: TrainConfig, seeds: list,
                 arch: Optional[TinyNetSpec] = None, val: Optional[Dataset] = None,
                 jobs: Optional[int] = None, clock: Optional[Callable[[], float]] = time.perf_counter,
                 on_row: Optional[Callable[[AblationRow], None]] = None) -> AblationReport:
    """
    Train every variant once per seed from seed-derived weights and collect a report.
    Without val, the tail of data is held out. clock=None records 0.0 seconds, which
    makes the report byte-reproducible.
    """
    if not seeds:
        raise ConfigError("at least one seed is required")
    if not variants:
        raise ConfigError("at least one variant is required")
    if val is None:
        data, val = split_train_val(data)
    arch = (arch or TinyNetSpec.default()).with_num_classes(data.num_classes)
    jobs = jobs or settings.CBAM_ABLATION_JOBS

    tasks = [(variant, seed) for variant in variants for seed in seeds]
    if jobs == 1:
        rows = []
        for variant, seed in tasks:
            rows.append(_run_one(variant, arch, data, val, cfg, seed, clock))
            if on_row is not None:
                on_row(rows[-1])
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_one, v, arch, data, val, cfg, s, clock) for v, s in tasks]
            rows = [f.result() for f in futures]
        if on_row is not None:
            for row in rows:
                on_row(row)

    for variant, row in zip((v for v, _ in tasks), rows):
        expected = spec_param_count(variant.apply(arch))
        if row.params != expected:
            raise ConfigError(f"{row.variant}: allocated {row.params} parameters, spec implies {expected}")
    return AblationReport(rows=rows)


# --- Run configs ------------------------------------------------------------
@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    arch: TinyNetSpec
    variant: Optional[AblationVariant] = None


def run_config_from_dict(payload: dict, with_variant: bool = True) -> RunConfig:
    """
    {"train": {...}, "arch": {...}, <variant keys>}. Both sections are optional. The
    remaining keys describe one variant (a bare CBAM config is a CBAM variant); ablation
    configs take no variant keys.
    """
    if not isinstance(payload, dict):
        raise ConfigError("run config must be a JSON object")
    payload = dict(payload)
    train_cfg = TrainConfig.from_dict(payload.pop("train", None))
    arch_data = payload.pop("arch", None)
    arch = TinyNetSpec.from_dict(arch_data) if arch_data is not None else TinyNetSpec.default()
    if not with_variant:
        if payload:
            raise ConfigError(f"unknown run config keys: {sorted(payload)}")
        return RunConfig(train=train_cfg, arch=arch)
    return RunConfig(train=train_cfg, arch=arch, variant=AblationVariant.from_dict(payload))


def load_run_config(path=None, with_variant: bool = True) -> RunConfig:
    return run_config_from_dict(read_json(path) if path else {}, with_variant)
