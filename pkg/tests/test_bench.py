import json

import numpy as np
import pytest

from colorctrl.bench import (ALL_MODES, AblationMode, BenchParams, CaseResult, EditCase, aggregate, bundled_suite_path,
                             load_bundled_suite, load_suite, ordering_ok, parse_suite, report_json, run_case,
                             run_suite, write_report)
from colorctrl.errors import InputError, LoadError
from colorctrl.imageio import write_mask
from colorctrl.metrics import PSNR_CAP
from colorctrl.model import ModelConfig
from colorctrl.sampler import SampleParams


@pytest.fixture(scope="module")
def fast():
    cfg = ModelConfig(image_size=16, patch=2, n_text=8, d_model=16, n_heads=2, n_layers=2, vocab_size=512)
    return BenchParams(sample=SampleParams(steps=3), config=cfg)


def case(**kw):
    base = dict(id="c", source_prompt="a white fox in a forest", target_prompt="a orange fox in a forest",
                blended_word="fox")
    base.update(kw)
    return EditCase(**base)


# -- suite files ---------------------------------------------------------

def test_bundled_suite_has_twenty_cases():
    cases = load_bundled_suite()
    assert len(cases) == 20 and len({c.id for c in cases}) == 20
    assert cases[0].id == "toy00" and cases[0].blended_word == "fox"
    assert bundled_suite_path().endswith("toy_suite.json")


@pytest.mark.parametrize("text, message", [
    ("[]", "no cases"),
    ("{}", "array"),
    ('[{"id": "a", "source_prompt": "red fox", "target_prompt": "blue fox"}]', "blended_word"),
    ('[{"id": "a", "source_prompt": "red fox", "target_prompt": "blue fox", "blended_word": "cat"}]', "both prompts"),
    ('[{"id": "a", "source_prompt": "red fox", "target_prompt": "blue fox", "blended_word": "fox", "x": 1}]',
     "unknown fields"),
    ('[{"id": "a", "source_prompt": "red fox", "target_prompt": "blue fox", "word_index": -1}]', "non-negative"),
    ('[{"id": "a", "source_prompt": "", "target_prompt": "blue fox", "word_index": 1}]', "source_prompt"),
    ('[{"id": "a", "source_prompt": "red fox", "target_prompt": "blue fox", "word_index": 1,\n'
     '  "reweight": {"blue": -2}}]', "reweight"),
])
def test_schema_errors(text, message):
    with pytest.raises(LoadError, match=message):
        parse_suite(text)


def test_duplicate_ids_are_rejected_with_line():
    text = ('[\n {"id": "a", "source_prompt": "red fox", "target_prompt": "blue fox", "word_index": 1},\n'
            ' {"id": "a", "source_prompt": "red fox", "target_prompt": "blue fox", "word_index": 1}\n]')
    with pytest.raises(LoadError, match="duplicate id 'a'"):
        parse_suite(text)


def test_json_errors_carry_line_context(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('[\n  {"id": "a",\n   "source_prompt": "red fox" "target_prompt": "x"}\n]')
    with pytest.raises(LoadError) as info:
        load_suite(path)
    msg = str(info.value)
    assert f"{path}:3:" in msg and '"source_prompt": "red fox"' in msg
    with pytest.raises(LoadError, match="cannot read"):
        load_suite(tmp_path / "missing.json")


def test_eval_mask_paths_are_relative_to_the_suite(tmp_path):
    (tmp_path / "masks").mkdir()
    path = tmp_path / "suite.json"
    path.write_text(json.dumps([{"id": "a", "source_prompt": "red fox", "target_prompt": "blue fox",
                                 "word_index": 1, "eval_mask": "masks/a.png", "reweight": {"blue": 1.5}}]))
    (c,) = load_suite(path)
    assert c.eval_mask == str(tmp_path / "masks" / "a.png")
    assert c.reweight == {"blue": 1.5} and c.blended_word is None


def test_mode_flags():
    assert AblationMode.FIX_SEED.spec_flags() == dict(enable_structure=False, enable_color=False)
    assert AblationMode.STRUCTURE_ONLY.spec_flags() == dict(enable_structure=True, enable_color=False)
    assert AblationMode.FULL.spec_flags() == dict(enable_structure=True, enable_color=True)
    assert [m.value for m in ALL_MODES] == ["fix_seed", "structure_only", "full"]


# -- aggregate -----------------------------------------------------------

def _metrics(canny, psnr):
    return {"canny_ssim": canny, "bg_psnr": psnr, "bg_ssim": 0.5, "semantic_whole": 0.1, "semantic_edited": 0.2,
            "mask_fraction": 0.25}


def test_aggregate_hand_means():
    rows = [(0.5, 20.0, 0.6, 22.0, 0.9, 30.0), (0.7, 24.0, 0.7, 25.0, 0.8, 33.0), (0.6, 22.0, 0.8, 28.0, 1.0, 36.0)]
    results = [CaseResult(f"c{i}", {"fix_seed": _metrics(a, b), "structure_only": _metrics(c, d),
                                    "full": _metrics(e, f)}) for i, (a, b, c, d, e, f) in enumerate(rows)]
    results.append(CaseResult("broken", {}, error="InputError: nope"))
    agg = aggregate(results)
    means = agg["means"]
    assert means["fix_seed"]["canny_ssim"] == pytest.approx(0.6)
    assert means["fix_seed"]["bg_psnr"] == pytest.approx(22.0)
    assert means["structure_only"]["bg_psnr"] == pytest.approx(25.0)
    assert means["full"]["canny_ssim"] == pytest.approx(0.9)
    assert means["full"]["bg_psnr"] == pytest.approx(33.0)
    assert agg["n_cases"] == 4 and agg["n_ok"] == 3 and agg["failed"] == ["broken"]
    assert agg["ordering_flags"] == {"canny_ssim_full>=structure_only>=fix_seed": True,
                                     "bg_psnr_full>=structure_only>=fix_seed": True,
                                     "bg_psnr_full>fix_seed": True}


def test_aggregate_single_case_and_failures():
    one = CaseResult("x", {m.value: _metrics(0.4, 30.0 - i) for i, m in enumerate(ALL_MODES)})
    agg = aggregate([one])
    assert agg["means"] == one.metrics
    assert agg["ordering_flags"]["bg_psnr_full>=structure_only>=fix_seed"] is False
    assert agg["ordering_flags"]["canny_ssim_full>=structure_only>=fix_seed"] is True
    with pytest.raises(InputError):
        aggregate([CaseResult("x", {}, error="boom")])


# -- running -------------------------------------------------------------

def test_self_edit_case_scores_perfectly(fast):
    same = case(target_prompt="a white fox in a forest")
    res = run_case(same, AblationMode.FULL, fast)
    assert res.ok and set(res.metrics) == {"full"}
    assert res.metrics["full"]["bg_psnr"] == PSNR_CAP
    assert res.metrics["full"]["canny_ssim"] == 1.0
    assert res.cache_bytes > 0 and res.wall_seconds > 0


def test_case_isolation(fast):
    good = case(id="good")
    bad = case(id="bad", blended_word=None, word_index=42)
    report, _ = run_suite([good, bad], params=fast)
    alone, _ = run_suite([good], params=fast)
    per = {c["id"]: c for c in report["per_case"]}
    assert per["bad"]["error"] and per["bad"]["metrics"] == {}
    assert per["good"] == alone["per_case"][0]
    assert report["runtime"]["failed"] == ["bad"]


def test_suite_mask_file_is_used(fast, tmp_path):
    mask = np.zeros((16, 16), bool)
    mask[2:5, 2:5] = True
    write_mask(tmp_path / "m.png", mask)
    res = run_case(case(eval_mask=str(tmp_path / "m.png")), AblationMode.FULL, fast)
    # the 3x3 block grows to 7x7 under the default radius-2 dilation
    assert res.metrics["full"]["mask_fraction"] == pytest.approx(7 * 7 / 256)


def test_report_schema_determinism_and_sidecar(fast, tmp_path):
    cases = [case(id="a"), case(id="b", source_prompt="a red car on a street", target_prompt="a blue car on a street",
                                blended_word="car")]
    r1, t1 = run_suite(cases, params=fast)
    r2, _ = run_suite(cases, params=fast, jobs=2)
    assert report_json(r1) == report_json(r2)
    assert set(r1) == {"per_case", "aggregate", "ordering_flags", "runtime"}
    assert set(r1["ordering_flags"]) == {"canny_ssim_full>=structure_only>=fix_seed",
                                         "bg_psnr_full>=structure_only>=fix_seed", "bg_psnr_full>fix_seed"}
    assert r1["runtime"]["params"]["steps"] == 3 and "total_seconds" not in json.dumps(r1)
    assert set(t1["per_case_seconds"]) == {"a", "b"}
    out = tmp_path / "report.json"
    write_report(r1, out, t1)
    assert json.loads(out.read_text()) == json.loads(report_json(r1))
    assert json.loads((tmp_path / "report.timing.json").read_text())["jobs"] == 1
    assert ordering_ok(r1) == all(r1["ordering_flags"].values())
