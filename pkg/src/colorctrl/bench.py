"""Benchmark harness: prompt-pair suites, ablation modes, metrics and reports.

A suite is a JSON array of case objects::

    {"id": "toy00",
     "source_prompt": "a white fox in a forest",
     "target_prompt": "a orange fox in a forest",
     "blended_word": "fox",           # or "word_index": 2
     "reweight": {"orange": 1.5},     # optional, words of the target prompt
     "eval_mask": "masks/toy00.png"}  # optional, relative to the suite file

Every case runs the source branch once and then one target branch per
ablation mode. Reports are plain JSON with sorted keys. Wall-clock times are
returned separately so that the report bytes depend only on the suite and
the parameters.
"""

from __future__ import annotations

import enum
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ColorCtrlError, InputError, LoadError
from .metrics import DEFAULT_DILATE, dilate, evaluate
from .model import ModelConfig, ToyMMDiT, find_word, tokenize
from .sampler import EditSpec, SampleParams, Sampler


class AblationMode(str, enum.Enum):
    FIX_SEED = "fix_seed"
    STRUCTURE_ONLY = "structure_only"
    FULL = "full"

    def spec_flags(self) -> dict:
        return {
            AblationMode.FIX_SEED: dict(enable_structure=False, enable_color=False),
            AblationMode.STRUCTURE_ONLY: dict(enable_structure=True, enable_color=False),
            AblationMode.FULL: dict(enable_structure=True, enable_color=True),
        }[self]


ALL_MODES = tuple(AblationMode)
ORDER_METRICS = ("canny_ssim", "bg_psnr")
MEAN_METRICS = ("canny_ssim", "bg_psnr", "bg_ssim", "semantic_whole", "semantic_edited", "mask_fraction")


@dataclass
class EditCase:
    id: str
    source_prompt: str
    target_prompt: str
    blended_word: str | None = None
    word_index: int | None = None
    reweight: dict[str, float] = field(default_factory=dict)
    eval_mask: str | None = None

    def source_word_index(self, config: ModelConfig) -> int:
        if self.word_index is not None:
            return self.word_index
        return find_word(tokenize(self.source_prompt, config), self.blended_word)

    def edit_spec(self, mode: AblationMode, config: ModelConfig, epsilon: float) -> EditSpec:
        target = tokenize(self.target_prompt, config)
        reweight = {find_word(target, w): float(s) for w, s in self.reweight.items()}
        return EditSpec(self.source_prompt, self.target_prompt, edit_words=[self.source_word_index(config)],
                        reweight=reweight, epsilon=epsilon, **mode.spec_flags())


_CASE_KEYS = {"id", "source_prompt", "target_prompt", "blended_word", "word_index", "reweight", "eval_mask"}


def _line_of(text: str, needle: str) -> int:
    pos = text.find(needle)
    return text.count("\n", 0, pos) + 1 if pos >= 0 else 0


def parse_suite(text: str, base_dir: str = ".", source: str = "<suite>") -> list[EditCase]:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if 0 < exc.lineno <= len(text.splitlines()) else ""
        raise LoadError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line.strip()}") from exc
    if not isinstance(raw, list):
        raise LoadError(f"{source}: suite must be a JSON array of cases")
    if not raw:
        raise LoadError(f"{source}: suite has no cases")
    cases, seen = [], set()
    for i, item in enumerate(raw):
        where = f"{source}: case {i}"
        if not isinstance(item, dict):
            raise LoadError(f"{where}: expected an object")
        if "id" in item:
            where += f" ({item['id']!r}, line {_line_of(text, json.dumps(item['id']))})"
        unknown = set(item) - _CASE_KEYS
        if unknown:
            raise LoadError(f"{where}: unknown fields {sorted(unknown)}")
        for key in ("id", "source_prompt", "target_prompt"):
            if not isinstance(item.get(key), str) or not item[key].strip():
                raise LoadError(f"{where}: missing or empty {key!r}")
        if item["id"] in seen:
            raise LoadError(f"{where}: duplicate id {item['id']!r}")
        seen.add(item["id"])
        word, index = item.get("blended_word"), item.get("word_index")
        if word is None and index is None:
            raise LoadError(f"{where}: needs 'blended_word' or 'word_index'")
        if index is not None and (not isinstance(index, int) or index < 0):
            raise LoadError(f"{where}: 'word_index' must be a non-negative integer")
        if index is None:
            src = [w.lower().strip(".,;:!?") for w in item["source_prompt"].split()]
            tgt = [w.lower().strip(".,;:!?") for w in item["target_prompt"].split()]
            if word.lower() not in src or word.lower() not in tgt:
                raise LoadError(f"{where}: blended word {word!r} must occur in both prompts")
        reweight = item.get("reweight") or {}
        if not isinstance(reweight, dict) or not all(
                isinstance(s, (int, float)) and s >= 0 for s in reweight.values()):
            raise LoadError(f"{where}: 'reweight' must map words to non-negative scales")
        mask = item.get("eval_mask")
        if mask is not None:
            mask = os.path.normpath(os.path.join(base_dir, mask))
        cases.append(EditCase(item["id"], item["source_prompt"], item["target_prompt"], word, index,
                              dict(reweight), mask))
    return cases


def load_suite(path) -> list[EditCase]:
    path = str(path)
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise LoadError(f"cannot read suite {path}: {exc}") from exc
    return parse_suite(text, os.path.dirname(os.path.abspath(path)), path)


def bundled_suite_path() -> str:
    return str(resources.files("colorctrl") / "data" / "toy_suite.json")


def load_bundled_suite() -> list[EditCase]:
    return load_suite(bundled_suite_path())


@dataclass
class BenchParams:
    sample: SampleParams = field(default_factory=lambda: SampleParams(record=True))
    config: ModelConfig = field(default_factory=ModelConfig)
    epsilon: float = 0.1
    dilate_radius: int = DEFAULT_DILATE
    scorer: str = "placeholder"

    def to_dict(self) -> dict:
        s = self.sample
        return {"steps": s.steps, "cfg_scale": s.cfg_scale, "seed": s.seed, "epsilon": self.epsilon,
                "dilate_radius": self.dilate_radius, "scorer": self.scorer, "model_digest": self.config.digest()}


@dataclass
class CaseResult:
    id: str
    metrics: dict[str, dict]  # mode -> metric name -> value
    cache_bytes: int = 0
    error: str | None = None
    wall_seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        # wall time is left out on purpose; see run_suite
        return {"id": self.id, "metrics": self.metrics, "cache_bytes": self.cache_bytes, "error": self.error}


def _as_modes(mode) -> tuple[AblationMode, ...]:
    if isinstance(mode, (str, AblationMode)):
        return (AblationMode(mode),)
    return tuple(AblationMode(m) for m in mode)


def run_case(case: EditCase, mode=ALL_MODES, params: BenchParams | None = None,
             sampler: Sampler | None = None) -> CaseResult:
    """Source branch once, then one target branch per mode, all scored against the source.

    Failures are caught and recorded on the result.
    """
    from .imageio import read_mask

    params = params or BenchParams()
    modes = _as_modes(mode)
    t0 = time.perf_counter()
    try:
        sampler = sampler or Sampler(ToyMMDiT(params.config))
        source, cache = sampler.run_source(case.source_prompt, params.sample)
        specs = [case.edit_spec(m, params.config, params.epsilon) for m in modes]
        results = sampler.run_edits(specs, params.sample, cache)
        extracted = sampler.edit_mask(specs[0], cache)
        if case.eval_mask is not None:
            region = read_mask(case.eval_mask)
        else:
            region = extracted.pixel_mask
        metrics = {}
        for m, res in zip(modes, results):
            report = evaluate(source, res.edited, region, params.dilate_radius, params.scorer, case.target_prompt)
            row = report.to_dict()
            row.pop("semantic_scorer")
            row["mask_fraction"] = float(dilate(region, params.dilate_radius).mean())
            metrics[m.value] = row
        return CaseResult(case.id, metrics, cache.nbytes, None, time.perf_counter() - t0)
    except (ColorCtrlError, ValueError, OSError) as exc:
        return CaseResult(case.id, {}, 0, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0)


def _mean(values) -> float:
    return float(math.fsum(values) / len(values))


def aggregate(results: list[CaseResult]) -> dict:
    """Per-mode metric means over successful cases plus the ordering flags."""
    ok = [r for r in results if r.ok]
    if not ok:
        raise InputError("every case failed; nothing to aggregate")
    modes = [m.value for m in ALL_MODES if all(m.value in r.metrics for r in ok)]
    means = {m: {k: _mean([r.metrics[m][k] for r in ok]) for k in MEAN_METRICS} for m in modes}
    flags = {}
    if all(m.value in means for m in ALL_MODES):
        full, struct, fix = (means[m.value] for m in (AblationMode.FULL, AblationMode.STRUCTURE_ONLY,
                                                      AblationMode.FIX_SEED))
        for k in ORDER_METRICS:
            flags[f"{k}_full>=structure_only>=fix_seed"] = bool(full[k] >= struct[k] >= fix[k])
        flags["bg_psnr_full>fix_seed"] = bool(full["bg_psnr"] > fix["bg_psnr"])
    return {"means": means, "n_cases": len(results), "n_ok": len(ok),
            "failed": sorted(r.id for r in results if not r.ok), "ordering_flags": flags}


def _run_one(args):
    case, modes, params = args
    return run_case(case, modes, params)


def run_suite(cases: list[EditCase], modes=ALL_MODES, params: BenchParams | None = None, jobs: int = 1):
    """Run every case and assemble the report.

    Returns ``(report, timing)``. ``report`` is fully determined by the cases
    and parameters, whatever ``jobs`` is; ``timing`` holds wall-clock seconds.
    """
    params = params or BenchParams()
    modes = _as_modes(modes)
    t0 = time.perf_counter()
    work = [(c, modes, params) for c in cases]
    if jobs > 1 and len(cases) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, work))
    else:
        results = [_run_one(w) for w in work]
    agg = aggregate(results)
    report = {
        "per_case": [r.to_dict() for r in results],
        "aggregate": agg["means"],
        "ordering_flags": agg["ordering_flags"],
        "runtime": {"params": params.to_dict(), "modes": [m.value for m in modes], "n_cases": agg["n_cases"],
                    "n_ok": agg["n_ok"], "failed": agg["failed"],
                    "cache_bytes_total": int(sum(r.cache_bytes for r in results))},
    }
    timing = {"total_seconds": time.perf_counter() - t0, "jobs": jobs,
              "per_case_seconds": {r.id: r.wall_seconds for r in results}}
    return report, timing


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def write_report(report: dict, path, timing: dict | None = None) -> None:
    """Write the report; timings go to a ``.timing.json`` sidecar next to it."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(report_json(report))
    if timing is not None:
        root, _ = os.path.splitext(str(path))
        with open(root + ".timing.json", "w", encoding="utf-8") as f:
            f.write(json.dumps(timing, sort_keys=True, indent=2) + "\n")


def ordering_ok(report: dict) -> bool:
    flags = report.get("ordering_flags", {})
    return bool(flags) and all(flags.values())
