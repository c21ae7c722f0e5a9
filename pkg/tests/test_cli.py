import csv
import json
from pathlib import Path

import numpy as np
import pytest

from lhfi import cli
from lhfi import model_core as mc
from lhfi.errors import DuplicateKeyError, MissingColumnError, ParseError, SamplerStateError, ValidationError

COUNTS = """site,replicate,m1,m2,m3,m4,m5,cardinality
1,1,10,5,3,2,1,40
1,2,8,6,4,0,2,30
2,1,1,1,20,10,5,50
"""
COVARS = """site,salinity,depth,sc,temperature
2,25.5,3.0,0.4,15
1,20.0,1.5,0.2,14
"""
GEOM = """site,easting,northing
1,0,0
2,3,4
"""


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


@pytest.fixture
def fixture_files(tmp_path):
    return (
        _write(tmp_path, "counts.csv", COUNTS),
        _write(tmp_path, "covariates.csv", COVARS),
        _write(tmp_path, "geometry.csv", GEOM),
    )


def test_ingest_two_site_fixture(fixture_files):
    got = cli.ingest(*fixture_files)
    assert got.observations == [
        mc.SiteObservation(1, 1, (10, 5, 3, 2, 1), 40),
        mc.SiteObservation(1, 2, (8, 6, 4, 0, 2), 30),
        mc.SiteObservation(2, 1, (1, 1, 20, 10, 5), 50),
    ]
    assert got.covariates.site_ids == (1, 2)
    np.testing.assert_array_equal(got.covariates["salinity"], [20.0, 25.5])
    np.testing.assert_array_equal(got.covariates["temperature"], [14, 15])
    assert [(g.site_id, g.easting, g.northing) for g in got.geometry] == [(1, 0, 0), (2, 3, 4)]


def test_counts_exceeding_cardinality_names_site_and_replicate(tmp_path):
    p = _write(tmp_path, "c.csv", COUNTS.replace("2,1,1,1,20,10,5,50", "2,1,1,1,30,10,15,50"))
    with pytest.raises(ValidationError, match=r"c.csv:4.*site 2, replicate 1"):
        cli.read_counts(p)


def test_duplicate_site_replicate(tmp_path):
    p = _write(tmp_path, "c.csv", COUNTS + "1,2,0,0,0,0,0,5\n")
    with pytest.raises(DuplicateKeyError, match="line 3"):
        cli.read_counts(p)


@pytest.mark.parametrize(
    "text,err,pattern",
    [
        (COUNTS.replace("m5,", ""), MissingColumnError, "m5"),
        (COUNTS.replace("10,5,3", "10,x,3"), ParseError, r":2 column 'm2'"),
        (COUNTS.replace("10,5,3", "10,-5,3"), ValidationError, "negative count in column 'm2'"),
        (COUNTS.replace(",40", ",0"), ValidationError, "cardinality"),
    ],
)
def test_count_errors_are_addressed(tmp_path, text, err, pattern):
    with pytest.raises(err, match=pattern):
        cli.read_counts(_write(tmp_path, "c.csv", text))


@pytest.mark.parametrize(
    "old,new,pattern",
    [("0.4,15", "1.4,15", "column 'sc'"), ("0.2,14", "0,14", "column 'sc'"), ("3.0,0.4", "-3.0,0.4", "column 'depth'")],
)
def test_covariate_range_errors(tmp_path, old, new, pattern):
    with pytest.raises(ValidationError, match=pattern):
        cli.read_covariates(_write(tmp_path, "v.csv", COVARS.replace(old, new)))


def test_cross_file_site_mismatch(tmp_path, fixture_files):
    counts, _, geom = fixture_files
    cov = _write(tmp_path, "v2.csv", "site,salinity\n1,20\n")
    with pytest.raises(ValidationError, match=r"no covariates for site\(s\) \[2\]"):
        cli.ingest(counts, cov, geom)


# -- end-to-end ----------------------------------------------------------------


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    (d / "design.json").write_text(json.dumps({"n_sites": 8, "replicates": 2, "seed": 4}))
    assert cli.main(["simulate", "--design", str(d / "design.json"), "--out", str(d / "data")]) == 0
    cfg = json.loads((d / "data" / "config.json").read_text())
    cfg.update(n_iterations=300, burn_in=100, thin=2, seed=9)
    (d / "data" / "config.json").write_text(json.dumps(cfg))
    return d


def _fit(sim_dir, out, *extra):
    return cli.main(["fit", "--config", str(sim_dir / "data" / "config.json"), "--out", str(out), *extra])


def _params(out):
    with open(out / "summary.csv") as fh:
        return [row["parameter"] for row in csv.DictReader(fh)]


def test_model4_census(sim_dir, tmp_path):
    assert _fit(sim_dir, tmp_path, "--preset", "model4") == 0
    expected = {"alpha0", "alpha_dd", "sigma_beta", "sigma_H", "theta2"} | {f"H_{i}" for i in range(1, 9)}
    names = _params(tmp_path)
    assert len(names) == len(set(names)) and set(names) == expected


def test_model2_census(sim_dir, tmp_path):
    assert _fit(sim_dir, tmp_path, "--preset", "model2") == 0
    names = set(_params(tmp_path))
    assert {"rho", "sigma_delta", "alpha_salinity", "alpha_dd", "variance_ratio"} <= names
    assert names - {f"H_{i}" for i in range(1, 9)} == {
        "alpha0", "alpha_salinity", "alpha_dd", "rho", "sigma_beta", "sigma_delta", "sigma_H", "theta2", "variance_ratio"
    }


def test_fit_outputs_and_determinism(sim_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _fit(sim_dir, a) == 0 and _fit(sim_dir, b) == 0
    files = sorted(p.name for p in a.iterdir())
    assert files == ["bgr.csv", "centring.json", "dic.txt", "health.csv", "overlap.csv", "summary.csv", "trace.csv"]
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    with open(a / "health.csv") as fh:
        ranks = sorted(int(r["rank"]) for r in csv.DictReader(fh))
    assert ranks == list(range(1, 9))
    with open(a / "trace.csv") as fh:
        assert sum(1 for _ in fh) == 1 + 2 * 100
    dic = dict(line.split() for line in (a / "dic.txt").read_text().splitlines())
    assert float(dic["DIC"]) == pytest.approx(float(dic["Dbar"]) + float(dic["p_D"]), rel=1e-8)
    c = _fit(sim_dir, tmp_path / "c", "--seed", "10")
    assert c == 0 and (tmp_path / "c" / "summary.csv").read_bytes() != (a / "summary.csv").read_bytes()


def test_summary_flags_consistent_with_quantiles(sim_dir, tmp_path):
    assert _fit(sim_dir, tmp_path) == 0
    with open(tmp_path / "summary.csv") as fh:
        for r in csv.DictReader(fh):
            lo, hi = float(r["q0.025"]), float(r["q0.975"])
            assert lo <= float(r["median"]) <= hi
            assert r["credible_0.95"] == ("1" if lo > 0 or hi < 0 else "0")


def test_exit_codes_and_no_partial_output(sim_dir, tmp_path, monkeypatch, capsys):
    cfg = sim_dir / "data" / "config.json"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**json.loads(cfg.read_text()), "bogus": 1}))
    assert cli.main(["fit", "--config", str(bad), "--out", str(tmp_path / "o1")]) == cli.EXIT_VALIDATION
    assert "[config]" in capsys.readouterr().err
    assert cli.main(["fit", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_IO

    def boom(*a, **k):
        raise SamplerStateError("chain 0 produced non-finite deviance")

    monkeypatch.setattr(cli, "run_chains", boom)
    out = tmp_path / "o2"
    assert _fit(sim_dir, out) == cli.EXIT_SAMPLER
    assert "[sampler]" in capsys.readouterr().err
    assert not out.exists() or list(out.iterdir()) == []


def test_validation_exit_for_bad_counts(sim_dir, tmp_path):
    data = sim_dir / "data"
    cfg = json.loads((data / "config.json").read_text())
    bad_counts = tmp_path / "counts.csv"
    bad_counts.write_text((data / "counts.csv").read_text().replace("\n1,1,", "\n1,1,-", 1))
    cfg["counts"] = str(bad_counts)
    for k in ("covariates", "geometry"):
        cfg[k] = str(data / cfg[k])
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert cli.main(["fit", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "o")]) == cli.EXIT_VALIDATION


def test_dd_command(tmp_path, capsys):
    g = _write(tmp_path, "g.csv", "site,easting,northing\n1,0,0\n2,6,8\n3,3,4\n")
    assert cli.main(["dd", "--geometry", str(g), "--west", "1", "--east", "2"]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0] == ["site", "dd"]
    assert {int(s): float(v) for s, v in rows[1:]} == {1: 0.0, 2: 10.0, 3: 5.0}
    assert cli.main(["dd", "--geometry", str(g), "--west", "1", "--east", "1"]) == cli.EXIT_VALIDATION


def test_presets_resolve(tmp_path, fixture_files):
    counts, cov, geom = fixture_files
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"counts": "counts.csv", "covariates": "covariates.csv", "geometry": "geometry.csv"}))
    for name in cli.PRESETS:
        rc = cli.load_config(cfg, preset=name)
        data, _ = cli.build_data(rc, cli.ingest(rc.counts, rc.covariates, rc.geometry))
        assert set(rc.spec.required_columns()) == set(data.covariates)
    three = cli.load_config(cfg, preset="model3")
    data, table = cli.build_data(three, cli.ingest(counts, cov, geom))
    np.testing.assert_allclose(data.column("log_depth_x_log_sc"), table["log_depth"] * table["log_sc"])


def test_log_level_env(monkeypatch, tmp_path):
    import logging

    monkeypatch.setenv(cli.LOG_ENV, "DEBUG")
    root = logging.getLogger()
    old = root.handlers[:]
    root.handlers = []
    try:
        g = _write(tmp_path, "g.csv", GEOM)
        cli.main(["dd", "--geometry", str(g), "--west", "1", "--east", "2"])
        assert root.level == logging.DEBUG
    finally:
        root.handlers = old
        root.setLevel(logging.WARNING)
