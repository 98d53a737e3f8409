import dataclasses
import json
import math

import numpy as np
import pytest

from ngstwa import cli_io
from ngstwa.cli_io import (
    ConfigError,
    ResultBundle,
    RunError,
    emit_series,
    list_presets,
    load_config,
    main,
    parse_config,
    read_series_csv,
    read_series_json,
    run,
)

MINIMAL = """\
method: ngs
model:
  preset: anharmonic
"""

SHORT_HTC = """\
name: short
method: ngs
model:
  preset: htc
  n_spins: 1
  g: 0.1
  lam: 1.0
lindblad:
  - kind: cavity_decay
    rate: 1.0
numerics:
  n_gaussians: 1
  t_final: 1.0
  n_traj: 3
  twa_n_traj: 200
  cutoffs: [6, 6]
  seed: 4
output:
  dt: 0.5
  observables: [n_cav, sz]
"""


def test_minimal_config_gets_defaults():
    spec = parse_config(MINIMAL)
    assert spec.model.omega == 1.0 and spec.model.mu == 1.0
    assert spec.numerics.n_gaussians == 4 and spec.numerics.t_final == 10.0
    assert spec.output.observables == ("n_cav", "x")
    assert spec.initial.cavity_alpha == 1.0
    assert len(spec.times) == 21


def test_disordered_preset_configuration():
    spec = load_config("htc_holstein_disorder")
    assert spec.model.n_spins == 3 and spec.model.lam == 1.0 and spec.model.g == 0.1
    assert np.allclose(spec.model.eps, [0.2, 0.3, 0.4], rtol=1e-15)
    assert spec.numerics.n_gaussians == 12 and spec.numerics.cutoffs == (10,)


def test_negative_rate_names_field_and_line():
    text = SHORT_HTC.replace("rate: 1.0", "rate: -1")
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.field == "lindblad[0].rate"
    assert exc.value.line == 10
    assert str(exc.value).startswith("line 10: lindblad[0].rate")


@pytest.mark.parametrize(
    "text,field",
    [
        (MINIMAL + "extra: 1\n", "extra"),
        (MINIMAL.replace("anharmonic", "laser"), "model.preset"),
        (MINIMAL + "numerics:\n  n_gaussians: 0\n", "numerics.n_gaussians"),
        (MINIMAL + "numerics:\n  t_final: 1.0\noutput:\n  dt: 0.3\n", "output.dt"),
        (MINIMAL + "output:\n  observables: [sz]\n", "output.observables[0]"),
        (MINIMAL.replace("ngs", "twa"), "method"),
        (MINIMAL + "  g: 0.1\n", "model.g"),
        ("method: [ngs\n", "<yaml>"),
    ],
)
def test_schema_errors(text, field):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.field == field


def test_expressions_in_numbers():
    spec = parse_config(MINIMAL + "numerics:\n  t_final: 2*pi\noutput:\n  dt: 2*pi/40\n")
    assert spec.numerics.t_final == pytest.approx(2 * math.pi)
    assert len(spec.times) == 41
    with pytest.raises(ConfigError):
        parse_config(MINIMAL + "numerics:\n  t_final: __import__('os')\n")


def test_config_hash_ignores_output_location():
    a = parse_config(SHORT_HTC)
    b = dataclasses.replace(a, output=dataclasses.replace(a.output, directory="elsewhere", formats=("csv",)))
    c = dataclasses.replace(a, numerics=dataclasses.replace(a.numerics, seed=5))
    assert a.config_hash() == b.config_hash() != c.config_hash()


def test_with_method_drops_unavailable_observables():
    spec = load_config("anharmonic_squeezed").with_method("oracle_closed")
    assert "infidelity" not in spec.output.observables
    with pytest.raises(ConfigError):
        parse_config(MINIMAL).with_method("twa")


def test_every_benchmark_has_a_preset():
    names = set(list_presets())
    expected = {"anharmonic_squeezed", "anharmonic_coherent", "gaussian_heff", "collective_weak", "collective_strong",
                "single_spin_open_kappa_10g"}
    for regime in ("weak", "holstein", "cavity", "strong"):
        expected |= {f"htc_{regime}", f"htc_{regime}_disorder", f"single_spin_fidelity_{regime}"}
    assert expected <= names
    for n in names:
        load_config(n)


def test_oracle_reference_for_anharmonic_preset():
    spec = load_config("anharmonic_squeezed").with_method("oracle_closed")
    spec = dataclasses.replace(spec, numerics=dataclasses.replace(spec.numerics, t_final=math.pi / 10),
                               output=dataclasses.replace(spec.output, dt=math.pi / 20))
    b = run(spec)
    assert b.complete and list(b.mean) == ["n_cav", "x"]
    # <n> is conserved by a^dag a + (a^dag a)^2
    assert np.allclose(b.mean["n_cav"], 1.0, atol=1e-9)
    assert b.mean["x"][0] == pytest.approx(math.sqrt(2), abs=1e-9)


def test_ngs_and_twa_share_the_grid_and_are_reproducible():
    spec = parse_config(SHORT_HTC)
    a = run(spec)
    b = run(spec)
    t = run(spec.with_method("twa"))
    o = run(spec.with_method("oracle_lindblad"))
    assert np.array_equal(a.times, t.times) and np.array_equal(a.times, o.times)
    for k in a.mean:
        assert np.array_equal(a.mean[k], b.mean[k]) and np.array_equal(a.stderr[k], b.stderr[k])
    assert a.metadata["config_hash"] == b.metadata["config_hash"]
    assert a.metadata["seeds"]["base"] == 4
    assert t.mean["sz"][0] == pytest.approx(0.5)


def _bundle(values, complete=True):
    t = np.array([0.0, 0.5, 1.0])
    return ResultBundle(t, {"n_cav": np.asarray(values, float)}, {"n_cav": np.zeros(3)},
                        {"config_hash": "abc", "code_version": "0.1.0"}, complete)


def test_emit_series_layout_and_round_trip(tmp_path):
    vals = [1.0 / 3.0, math.pi * 1e-17, -2.5e300]
    paths = emit_series(_bundle(vals), tmp_path, "demo")
    csv_text = (tmp_path / "demo.csv").read_text()
    lines = csv_text.splitlines()
    assert lines[0].startswith("# ngstwa") and "metadata=demo.meta.json" in lines[0]
    assert lines[1] == "# units: t in 1/nu"
    assert lines[2] == "t,n_cav_mean,n_cav_stderr"
    assert len(lines) == 3 + 3
    back = read_series_csv(tmp_path / "demo.csv")
    assert np.array_equal(back["n_cav_mean"], vals)
    assert np.array_equal(read_series_json(tmp_path / "demo.json")["n_cav_mean"], vals)
    assert json.loads((tmp_path / "demo.meta.json").read_text())["config_hash"] == "abc"
    assert len(paths) == 3


def test_nan_written_as_null(tmp_path):
    emit_series(_bundle([0.1, float("nan"), 0.3], complete=False), tmp_path, "part")
    text = (tmp_path / "part.csv").read_text()
    assert "null" in text and "nan" not in text.lower().replace("null", "")
    assert "# status: partial" in text
    rows = json.loads((tmp_path / "part.json").read_text())["rows"]
    assert rows[1][1] is None
    assert math.isnan(read_series_csv(tmp_path / "part.csv")["n_cav_mean"][1])


def test_cli_presets(capsys):
    assert main(["presets", "list"]) == 0
    out = capsys.readouterr().out
    assert "htc_holstein_disorder" in out
    assert main(["presets", "show", "gaussian_heff"]) == 0
    assert "preset: gaussian_heff" in capsys.readouterr().out
    assert main(["presets", "show", "nope"]) == 2


def test_cli_run_and_exit_codes(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "short.yaml"
    cfg.write_text(SHORT_HTC)
    assert main(["run", str(cfg), "--method", "oracle_lindblad", "--output-dir", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "short.csv").exists() and (tmp_path / "out" / "short.json").exists()
    bad = tmp_path / "bad.yaml"
    bad.write_text(SHORT_HTC.replace("rate: 1.0", "rate: -1"))
    assert main(["run", str(bad)]) == 2
    assert "lindblad[0].rate" in capsys.readouterr().err

    def boom(spec):
        raise RunError("engine exploded")

    monkeypatch.setattr(cli_io, "run", boom)
    assert main(["run", str(cfg), "--output-dir", str(tmp_path / "x")]) == 1
    assert "engine exploded" in capsys.readouterr().err
    monkeypatch.setattr(cli_io, "run", lambda spec: _bundle([1.0, float("nan"), 0.5], complete=False))
    assert main(["run", str(cfg), "--output-dir", str(tmp_path / "p")]) == 1


def test_engine_errors_carry_context(monkeypatch):
    spec = parse_config(SHORT_HTC).with_method("oracle_lindblad")

    def fail(*a, **k):
        raise np.linalg.LinAlgError("singular")

    monkeypatch.setattr(cli_io, "_run_oracle", fail)
    with pytest.raises(RunError, match="oracle_lindblad engine failed for model htc"):
        run(spec)
