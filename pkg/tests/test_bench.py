import random

import numpy as np
import pytest

from wavelg import bench
from wavelg.bench import (
    REPORT_HEADER,
    Budgets,
    ExperimentSpec,
    MetricsRow,
    depth_grid,
    format_report,
    mean_top1,
    parse_mask,
    read_report,
    run_component_ablation,
    run_depth_sweep,
    run_width_sweep,
    width_grid,
    write_report,
)
from wavelg.errors import IncompatibleError, InputError, TrainingError
from wavelg.learngene import bank_init, save_bank, scaler_shapes, transferred_param_count
from wavelg.vit import ModelConfig

FAST = Budgets(train_epochs=2, direct_pt_epochs=3, fit_iterations=4, fit_subset_size=64)
BASE = ModelConfig(depth=1, embed_dim=16, heads=2, classes=4)


@pytest.fixture(scope="module")
def bank():
    return bank_init(8, (2, 2, 2), seed=0)


def test_metrics_row_validates_top1():
    with pytest.raises(InputError):
        MetricsRow("r", "wave", 1, 8, "all", 0, 1, "val", 100.5, 0, 0.0)


def test_spec_invariants(bank):
    with pytest.raises(InputError, match="bank"):
        ExperimentSpec("depth", [BASE], [0], ["wave"])
    with pytest.raises(InputError):
        ExperimentSpec("depth", [], [0], ["he_init"])
    with pytest.raises(InputError):
        ExperimentSpec("depth", [BASE], [], ["he_init"])
    with pytest.raises(InputError):
        ExperimentSpec("depth", [BASE], [0], ["magic"])
    with pytest.raises(InputError):
        ExperimentSpec("time", [BASE], [0], ["he_init"])
    assert parse_mask("fc+att") == ("att", "fc") and parse_mask("") == ()
    with pytest.raises(InputError):
        parse_mask("att+norm")


def test_depth_sweep_bookkeeping_and_transfer_count(bank, tiny_data):
    spec = ExperimentSpec("depth", depth_grid(BASE, [1, 2, 3]), [0, 1], ["wave", "he_init", "direct_pt"],
                          FAST, bank)
    rows = run_depth_sweep(spec, tiny_data)
    by_method = {m: [r for r in rows if r.method == m] for m in spec.methods}
    assert len(by_method["wave"]) == 3 * 2 * FAST.train_epochs
    assert len(by_method["he_init"]) == 3 * 2 * FAST.train_epochs
    assert len(by_method["direct_pt"]) == 3 * 2 * FAST.direct_pt_epochs
    assert {r.params_transferred for r in by_method["wave"]} == {transferred_param_count(bank)}
    assert {r.params_transferred for r in by_method["he_init"]} == {0}
    assert all(r.split == "val" and 0 <= r.top1 <= 100 for r in rows)
    assert rows == bench.sort_rows(rows)


def test_width_sweep_validates_before_training(bank, tiny_data, monkeypatch):
    assert len(width_grid(BASE, [8, 16, 24], head_dim=8)) == 3
    spec = ExperimentSpec("width", width_grid(BASE, [8, 12], head_dim=4), [0], ["wave"], FAST, bank)

    def boom(*a, **k):
        raise AssertionError("training started")

    monkeypatch.setattr(bench, "train_model", boom)
    with pytest.raises(IncompatibleError, match="width=12.*t=8"):
        run_width_sweep(spec, tiny_data)


def test_proj_scaler_count_grows_quadratically():
    t = 8
    for k in (1, 2, 3):
        s1, s2 = scaler_shapes(t, ModelConfig(depth=1, embed_dim=k * t, heads=k))["proj"]
        assert s1 * s2 == k * k


def test_ablation_all_off_matches_he_init_bit_exactly(bank, tiny_data):
    masks = ["", "att", "att+proj+fc"]
    spec = ExperimentSpec("components", [BASE], [0, 1], ["wave"], FAST, bank, masks=masks)
    rows = run_component_ablation(spec, tiny_data)
    assert {r.components_mask for r in rows} == {"none", "att", "att+proj+fc"}
    he = run_depth_sweep(ExperimentSpec("depth", [BASE], [0, 1], ["he_init"], FAST), tiny_data)
    for seed in (0, 1):
        off = [r.top1 for r in rows if r.components_mask == "none" and r.seed == seed]
        ref = [r.top1 for r in he if r.seed == seed]
        assert off == ref
    assert {r.params_transferred for r in rows if r.components_mask == "none"} == {0}


def test_failed_cell_does_not_abort_sweep(bank, tiny_data, monkeypatch):
    real = bench._run_cell

    def flaky(method, cfg, seed, *rest):
        if seed == 1:
            raise TrainingError("diverged", step=3)
        return real(method, cfg, seed, *rest)

    monkeypatch.setattr(bench, "_run_cell", flaky)
    rows = run_depth_sweep(ExperimentSpec("depth", [BASE], [0, 1, 2], ["he_init"], FAST), tiny_data)
    errors = [r for r in rows if r.split == "error"]
    assert len(errors) == 1 and errors[0].seed == 1
    assert len([r for r in rows if r.split == "val"]) == 2 * FAST.train_epochs


def test_sweep_reproducible_and_parallel_merge_identical(bank, tiny_data):
    spec = lambda: ExperimentSpec("depth", depth_grid(BASE, [1, 2]), [0, 1], ["wave", "he_init"], FAST, bank,
                                  record_wall_time=False)
    a = format_report(run_depth_sweep(spec(), tiny_data))
    b = format_report(run_depth_sweep(spec(), tiny_data))
    c = format_report(run_depth_sweep(spec(), tiny_data, jobs=2))
    assert a == b == c


def test_bank_path_in_spec(bank, tiny_data, tmp_path):
    save_bank(bank, tmp_path / "b.wlg")
    spec = ExperimentSpec("depth", [BASE], [0], ["wave"], FAST, str(tmp_path / "b.wlg"))
    rows = run_depth_sweep(spec, tiny_data)
    assert rows[0].params_transferred == transferred_param_count(bank)


# ---- reports --------------------------------------------------------------

def _random_rows(n, seed):
    r = random.Random(seed)
    return [MetricsRow(f"run-{r.randint(0, 9)}", r.choice(["wave", "he_init"]), r.randint(1, 6),
                       r.choice([32, 64]), "all", r.randint(0, 2), r.randint(0, 4), "val",
                       r.uniform(0, 100), r.randint(0, 5000), r.uniform(0, 10)) for _ in range(n)]


def test_header_exact_and_round_trip(tmp_path):
    rows = _random_rows(20, 0)
    write_report(rows, tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text()
    assert text.splitlines()[0] == (
        "run_id,method,depth,width,components_mask,seed,epoch,split,top1,params_transferred,wall_time"
    ) == REPORT_HEADER
    back = read_report(tmp_path / "r.csv")
    assert back == bench.sort_rows(rows)


def test_sort_is_stable_under_run_id_epoch():
    rows = _random_rows(100, 1)
    for i, r in enumerate(rows):
        r.params_transferred = i  # tag original order
    out = bench.sort_rows(rows)
    keys = [(r.run_id, r.epoch) for r in out]
    assert keys == sorted(keys)
    for a, b in zip(out, out[1:]):
        if (a.run_id, a.epoch) == (b.run_id, b.epoch):
            assert a.params_transferred < b.params_transferred


def test_report_errors(tmp_path):
    with pytest.raises(InputError):
        write_report([], tmp_path / "x.csv")
    (tmp_path / "dir.csv").mkdir()
    with pytest.raises(OSError, match="dir.csv"):
        write_report(_random_rows(1, 0), tmp_path / "dir.csv")


def test_mean_top1_uses_final_epoch():
    rows = [MetricsRow("a", "wave", 2, 8, "all", 0, e, "val", v, 0, 0.0) for e, v in [(1, 10.0), (2, 30.0)]]
    rows += [MetricsRow("b", "wave", 2, 8, "all", 1, 1, "val", 50.0, 0, 0.0)]
    assert mean_top1(rows, method="wave") == 40.0
    with pytest.raises(InputError):
        mean_top1(rows, method="he_init")
