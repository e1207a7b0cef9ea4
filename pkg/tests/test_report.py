import csv
import json
import math

import pytest

from capmoe.capacity import capacity_limit
from capmoe.gating import expert_load, softmax_rows, topk_select
from capmoe.latsim import DeviceMap
from capmoe.report import (
    CSV_HEADER,
    Policy,
    SweepResult,
    analyze_layer,
    read_report,
    run_sweep,
    sweep_csv,
    sweep_json,
    write_report,
)
from capmoe.trace import SyntheticSpec, generate_synthetic

from conftest import trace_from_choices

GAMMAS = [math.inf, 3.0, 2.0, 1.5, 1.0]


def test_analyze_uniform_trace():
    # Every expert gets exactly N-bar = 4 tokens.
    tr = trace_from_choices([[i % 4, (i + 1) % 4] for i in range(8)], n=4, k=2)
    rep = analyze_layer(tr, [3.0, 1.0])
    assert rep.normalized_loads == [1.0] * 4
    assert rep.max_normalized == 1.0
    assert [dt for _, dt in rep.gamma_to_DT] == [0.0, 0.0]


def test_analyze_running_example(running_trace):
    rep = analyze_layer(running_trace, [1.0])
    assert rep.normalized_loads == [2.0, 0.5, 0.5]
    assert rep.gamma_to_DT == [(1.0, 1 / 3)]


def test_analyze_scratch_like():
    tr = generate_synthetic(SyntheticSpec(1024, 64, 8, seed=2, preset="scratch-like"))
    rep = analyze_layer(tr, [3.0, 2.0, 1.5, 1.0])
    assert rep.max_normalized >= 5
    dts = [dt for _, dt in rep.gamma_to_DT]
    assert dts == sorted(dts)
    assert analyze_layer(tr, [rep.max_normalized]).gamma_to_DT[0][1] == 0.0


def test_analyze_needs_gammas(running_trace):
    with pytest.raises(ValueError):
        analyze_layer(running_trace, [])


def test_policy_parse():
    assert Policy.parse("drop:order").metric == "order"
    assert Policy.parse("reroute:3").rounds == 3
    assert Policy.parse("expert_drop:0.25").fraction == 0.25
    assert Policy.parse("drop").name == "drop:score"
    for bad in ("drop:fifo", "reroute:0", "magic"):
        with pytest.raises(ValueError):
            Policy.parse(bad)


def test_sweep_running_example(running_trace):
    res = run_sweep(running_trace, [Policy("drop"), Policy("reroute", rounds=2)], [math.inf, 1.0])
    rows = {(r.policy, r.gamma): r for r in res.rows}
    base = rows[("drop:score", math.inf)]
    assert (base.dropped_fraction, base.layer_speedup, base.e2e_speedup, base.divergence) == (0, 1.0, 1.0, 0.0)
    assert base.retained_fraction == 1.0
    drop = rows[("drop:score", 1.0)]
    assert drop.capacity == 2 and drop.retained_fraction == pytest.approx(4 / 6)
    assert drop.dropped_fraction == pytest.approx(1 / 3)
    assert drop.layer_speedup == 2.0
    assert drop.divergence > 0
    rr = rows[("reroute:2", 1.0)]
    assert rr.retained_fraction == 1.0
    assert rr.layer_speedup == 2.0
    assert rr.max_device_load == 2


def test_sweep_rows_ordered_and_monotone():
    tr = generate_synthetic(SyntheticSpec(800, 16, 2, seed=4, preset="scratch-like"))
    res = run_sweep(tr, [Policy("drop"), Policy("reroute")], [1.0, math.inf, 2.0, 1.5, 3.0])
    assert len(res.rows) == 10
    n, k, t = tr.n, tr.k, tr.t
    base = expert_load(topk_select(softmax_rows(tr), k), n)
    for name in ("drop:score", "reroute:2"):
        rows = [r for r in res.rows if r.policy == name]
        assert [r.gamma for r in rows] == [math.inf, 3.0, 2.0, 1.5, 1.0]
        speedups = [r.layer_speedup for r in rows]
        assert speedups == sorted(speedups)
        for r in rows:
            # Brute-force max load after capping.
            cap = capacity_limit(r.gamma, t, k, n)
            assert r.max_device_load == min(int(base.max()), cap)
    for r in res.rows:
        if r.policy == "drop:score":
            assert r.retained_fraction == pytest.approx(1 - r.dropped_fraction, abs=1e-15)


def test_sweep_expert_drop_row():
    tr = generate_synthetic(SyntheticSpec(400, 10, 2, seed=1, skew=1.0))
    res = run_sweep(tr, [Policy("expert_drop", fraction=0.1)], [2.0])
    (row,) = res.rows
    assert row.retained_fraction == pytest.approx(1 - row.dropped_fraction)
    assert row.layer_speedup >= 1.0


def test_sweep_device_map_mismatch(running_trace):
    with pytest.raises(ValueError):
        run_sweep(running_trace, [Policy("drop")], [1.0], DeviceMap.one_per_device(4))


def sample_result():
    tr = generate_synthetic(SyntheticSpec(300, 8, 2, seed=3, skew=1.5))
    return run_sweep(tr, [Policy("drop"), Policy("reroute"), Policy("drop", metric="random", seed=5)],
                     GAMMAS, DeviceMap.round_robin(8, 4))


def test_json_round_trip(tmp_path):
    res = sample_result()
    p = tmp_path / "r.json"
    write_report(res, p, "json")
    back = read_report(p)
    assert back.rows == res.rows
    assert back.meta == res.meta
    assert set(json.loads(p.read_text())) == {"meta", "rows"}


def test_csv_layout(tmp_path):
    res = sample_result()
    p = tmp_path / "r.csv"
    write_report(res, p, "csv")
    rows = list(csv.reader(p.open()))
    assert tuple(rows[0]) == CSV_HEADER
    assert len(rows) == 1 + 3 * len(GAMMAS)
    assert rows[1][1] == "inf" and rows[1][2] == "inf"
    # Shortest round-trip decimals.
    for line, r in zip(rows[1:], res.rows):
        assert float(line[5]) == r.layer_speedup


def test_empty_sweep_header_only():
    assert sweep_csv(SweepResult(meta={})) == ",".join(CSV_HEADER) + "\n"


def test_reports_are_byte_identical():
    a, b = sample_result(), sample_result()
    assert sweep_csv(a) == sweep_csv(b)
    assert sweep_json(a) == sweep_json(b)


def test_write_report_errors(tmp_path):
    res = sample_result()
    with pytest.raises(OSError, match="cannot write report"):
        write_report(res, tmp_path / "nope" / "r.csv")
    with pytest.raises(ValueError):
        write_report(res, tmp_path / "r.xml", "xml")
