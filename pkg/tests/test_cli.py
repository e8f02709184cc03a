import csv

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqmorse import cli
from eqmorse import critstruct as cs
from eqmorse.geometry import ConfigurationError

GOLD = cli.GOLDEN_DIR


def cfg_text(name, extra=""):
    return f"[scenario]\nname = {name}\n{extra}"


@pytest.fixture(scope="module")
def sphere_report():
    return cli.run(cli.parse_config((GOLD / "sphere_stabilized.ini").read_text()))


def test_parse_defaults():
    c = cli.parse_config(cfg_text("sphere_height"))
    assert (c.directions, c.samples, c.t_max, c.capture_radius, c.truncation) == (64, 16, 60.0, 1e-3, 6)
    assert c.recipes == [] and c.params == {}


def test_parse_recipes_and_params():
    c = cli.parse_config(cfg_text("mapping_torus", "[params]\ntheta2_scale = 1.0\n"
                                  "[stabilize.P2]\nlambda = 0.1\n[stabilize.R1]\nlambda = 0.1\ndelta = 0.01\n"))
    assert c.params == {"theta2_scale": 1.0}
    assert sorted(r["target"] for r in c.recipes) == ["P2", "R1"]
    assert [r for r in c.recipes if r["target"] == "R1"][0]["delta"] == 0.01


@pytest.mark.parametrize("text", [
    "[scenario]\n",
    cfg_text("klein_bottle"),
    cfg_text("sphere_height", "[flow]\nspeed = 3\n"),
    cfg_text("sphere_height", "[flow]\ndirections = 2\n"),
    cfg_text("sphere_height", "[flow]\ncapture_radius = 0.5\n"),
    cfg_text("sphere_height", "[complex]\ntruncation = 0\n"),
    cfg_text("sphere_height", "[complex]\ntruncation = six\n"),
    cfg_text("sphere_height", "[plotting]\ncolor = red\n"),
    cfg_text("sphere_height", "[stabilize.N]\ndelta = 0.01\n"),
    cfg_text("sphere_height", "[stabilize.N]\nlambda = 0.1\nrho = 1\n"),
    cfg_text("sphere_height", "[output]\nformat = json\n"),
    "not an ini file",
])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigurationError):
        cli.parse_config(text)


names = st.sampled_from(["sphere_height", "sphere_stabilized", "mapping_torus", "torus_with_legs"])


@st.composite
def configs(draw):
    c = cli.RunConfig(draw(names))
    c.directions = draw(st.integers(8, 1024))
    c.samples = draw(st.integers(1, 256))
    c.t_max = draw(st.floats(1.0, 1e4))
    c.capture_radius = draw(st.floats(1e-6, 1e-2))
    c.truncation = draw(st.integers(1, 64))
    c.verbose = draw(st.booleans())
    if draw(st.booleans()):
        c.recipes = [{"target": "P2", "lambda": draw(st.floats(1e-4, 10.0))}]
    if draw(st.booleans()):
        c.flows = "lines.csv"
    return c


@settings(max_examples=60, deadline=None)
@given(configs())
def test_config_round_trip(c):
    text = cli.serialize_config(c)
    back = cli.parse_config(text)
    assert back == c
    assert cli.serialize_config(back) == text


def test_sphere_height_skips_complex():
    rep = cli.run(cli.parse_config(cfg_text("sphere_height")))
    text = rep.render()
    assert "unstable orbit S_N; complex skipped" in rep.warnings
    assert "[orbits]" in text and "[differential" not in text
    assert rep.ordinary is None


def test_sphere_report_matches_golden(sphere_report):
    assert cli.compare_against_golden(sphere_report.render(), GOLD / "sphere_stabilized.txt") == []


def test_report_has_no_timing(sphere_report):
    assert sphere_report.timing
    text = sphere_report.render()
    assert "took" not in text and " s\n" not in text


def test_flipped_sign_gives_one_line_diff(sphere_report, tmp_path):
    gold = (GOLD / "sphere_stabilized.txt").read_text()
    bad = gold.replace("d(n'11) = 0", "d(n'11) = -n'10", 1)
    assert bad != gold
    p = tmp_path / "bad.txt"
    p.write_text(bad)
    diff = cli.compare_against_golden(sphere_report.render(), p)
    assert len(diff) == 1
    assert "differential ordinary" in diff[0] and "n'11" in diff[0]


def test_golden_without_sections_is_a_schema_error(sphere_report, tmp_path):
    p = tmp_path / "empty.txt"
    p.write_text("scenario sphere_stabilized\n[warnings]\n")
    with pytest.raises(cli.GoldenSchemaError):
        cli.compare_against_golden(sphere_report.render(), p)


def test_flow_csv(sphere_report, tmp_path):
    p = tmp_path / "flows.csv"
    n = cli.emit_flow_csv(sphere_report, p)
    rows = list(csv.reader(p.open()))
    assert rows[0] == ["line_id", "t", "chart", "c1", "c2", "c3"]
    assert len(rows) - 1 == n
    keys = [(r[0], float(r[1])) for r in rows[1:]]
    assert keys == sorted(keys)
    counts = cli.read_flow_csv(p)
    want = {}
    for src in sorted(sphere_report.lines):
        for i, ln in enumerate(sphere_report.lines[src]):
            want[f"{src}:{i:05d}"] = len(ln.t)
    assert counts == want
    # nine significant digits
    assert all(len(r[3].lstrip("-").replace(".", "").lstrip("0").split("e")[0]) <= 9 for r in rows[1:])


def test_empty_flow_csv_is_header_only(tmp_path):
    rep = cli.RunReport(cli.RunConfig("sphere_height"), "sphere_height")
    p = tmp_path / "none.csv"
    assert cli.emit_flow_csv(rep, p) == 0
    assert p.read_text().strip() == "line_id,t,chart,c1,c2,c3"


def test_recipes_from_config_build_the_stabilized_torus():
    c = cli.parse_config(cfg_text("mapping_torus", "[stabilize.P2]\nlambda = 0.1\n[stabilize.R1]\nlambda = 0.1\n"))
    s = cli.build_scenario_checked(c)
    labels = [o.label for o in cs.find_critical_orbits(s)]
    assert labels == ["S0", "Rbar0", "R1'", "Q1", "Pbar1", "P2'"]


def test_main_exit_codes(tmp_path, monkeypatch, capsys):
    good = GOLD / "sphere_stabilized.ini"
    assert cli.main([str(good), "-o", str(tmp_path), "--emit-flows"]) == cli.EXIT_OK
    assert (tmp_path / "sphere_stabilized.txt").read_text() == (GOLD / "sphere_stabilized.txt").read_text()
    assert (tmp_path / "flows.csv").exists()
    assert cli.main([str(good), "--golden", str(GOLD / "sphere_stabilized.txt")]) == cli.EXIT_OK

    bad = tmp_path / "bad.ini"
    bad.write_text(cfg_text("sphere_height", "[flow]\nspeed = 1\n"))
    assert cli.main([str(bad)]) == cli.EXIT_CONFIG
    assert cli.main([str(tmp_path / "missing.ini")]) == cli.EXIT_CONFIG
    assert cli.main([str(good), "--truncation", "0"]) == cli.EXIT_CONFIG

    wrong = tmp_path / "wrong.txt"
    wrong.write_text((GOLD / "sphere_stabilized.txt").read_text().replace("H^2 rank 2", "H^2 rank 3"))
    assert cli.main([str(good), "--golden", str(wrong)]) == cli.EXIT_GOLDEN

    def boom(*a, **k):
        raise RuntimeError("newton diverged")

    monkeypatch.setattr(cs, "find_critical_orbits", boom)
    assert cli.main([str(good)]) == cli.EXIT_PIPELINE
    assert "[critical orbits]" in capsys.readouterr().err


def test_truncation_flag_changes_cartan_window(tmp_path):
    good = GOLD / "sphere_stabilized.ini"
    assert cli.main([str(good), "-o", str(tmp_path), "--truncation", "3"]) == cli.EXIT_OK
    text = (tmp_path / "sphere_stabilized.txt").read_text()
    assert "[differential cartan K=3]" in text
    assert "H^6 rank" not in text.split("[cohomology cartan]")[1]


def test_inline_comments_are_ignored():
    c = cli.parse_config(cfg_text("sphere_height  ; catalogue name", "[flow]\nsamples = 32  # per source\n"))
    assert (c.scenario, c.samples) == ("sphere_height", 32)
