import json
import math
from pathlib import Path

import numpy as np
import pytest

from dbhlab.cli import ConfigError, ExperimentConfig, emit_plot_data, main, run, validate
from dbhlab.errors import DomainError


def write_config(tmp_path: Path, name="cfg.json", **d) -> Path:
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return p


def read_csv(path: Path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# ")
    header = lines[1].split(",")
    return header, [l.split(",") for l in lines[2:]]


def read_dat(path: Path):
    rows = []
    for line in path.read_text().splitlines():
        if line.startswith("#") or not line.strip():
            continue
        rows.append([float(x) for x in line.split()])
    return np.array(rows)


PHASE = dict(kind="phase-grid", nx=4, ny=1, J_over_U=[0.02, 0.0625, 0.1], W_over_U=[0.0])


# --- config and validation ------------------------------------------------------


def test_config_round_trip():
    cfg = ExperimentConfig(kind="bragg", J_over_U=[0.1], omega_over_U=[0.5, 0.6], modes=[[1, 0]], seeds=[3, 4])
    again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert again.to_json() == cfg.to_json()
    assert again.digest == cfg.digest


def test_seed_list():
    a = ExperimentConfig(kind="phase-grid", J_over_U=[0.1], n_seeds=3, master_seed=9)
    assert a.seed_list() == ExperimentConfig(kind="phase-grid", J_over_U=[0.1], n_seeds=3, master_seed=9).seed_list()
    assert len(set(a.seed_list())) == 3
    assert ExperimentConfig(kind="phase-grid", J_over_U=[0.1], seeds=[5, 6]).seed_list() == [5, 6]


@pytest.mark.parametrize(
    "bad, field",
    [
        (dict(kind="phase-grid", J_over_U=[]), "J_over_U"),
        (dict(kind="phase-grid", J_over_U=[-0.1]), "J_over_U"),
        (dict(kind="nonsense"), "kind"),
        (dict(kind="phase-grid", J_over_U=[0.1], U_mhz=0.0), "U_mhz"),
        (dict(kind="bragg", J_over_U=[0.1], omega_over_U=[0.6, 0.5]), "omega_over_U"),
        (dict(kind="compressibility", J_over_U=[0.1], protocols=["XYZ"]), "protocols"),
        (dict(kind="sw-derive"), "device"),
    ],
)
def test_invalid_config_fields(bad, field):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict(bad).check()
    assert info.value.field == field


def test_unknown_field_rejected():
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_dict({"kind": "phase-grid", "colour": "red"})


def test_validate_examples():
    big = validate(ExperimentConfig(kind="phase-grid", nx=4, ny=9, ntotal=36, nmax=2, J_over_U=[0.1]))
    assert not big["accepted"]
    # central trinomial coefficient of order 36
    assert big["dimension"] == sum(math.comb(36, k) * math.comb(36 - k, k) for k in range(19))
    small = validate(ExperimentConfig(kind="phase-grid", nx=2, ny=3, ntotal=6, nmax=2, J_over_U=[0.1]))
    assert small["accepted"] and small["dimension"] == 141 and small["solver"] == "dense"


def test_validate_exit_codes(tmp_path, capsys):
    assert main(["validate", "--config", str(write_config(tmp_path, kind="phase-grid", nx=4, ny=9, ntotal=36, J_over_U=[0.1]))]) == 3
    assert "exceeds the cap" in capsys.readouterr().out
    assert main(["validate", "--config", str(write_config(tmp_path, kind="phase-grid", nx=2, ny=3, J_over_U=[0.1]))]) == 0
    assert '"dimension": 141' in capsys.readouterr().out
    assert main(["validate", "--config", str(write_config(tmp_path, kind="phase-grid", J_over_U=[]))]) == 2
    assert "J_over_U" in capsys.readouterr().err


def test_kind_mismatch_and_missing_file(tmp_path, capsys):
    cfg = write_config(tmp_path, **PHASE)
    assert main(["bragg", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert main(["phase-grid", "--config", str(tmp_path / "none.json")]) == 2
    assert "config error" in capsys.readouterr().err


def test_oversized_run_refused(tmp_path):
    with pytest.raises(ConfigError, match="cap"):
        run(ExperimentConfig(kind="phase-grid", nx=4, ny=9, ntotal=36, J_over_U=[0.1]), tmp_path)


# --- phase grid -------------------------------------------------------------------


@pytest.fixture(scope="module")
def phase_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("phase")
    cfg = write_config(out, **PHASE)
    assert main(["phase-grid", "--config", str(cfg), "--out", str(out / "a")]) == 0
    return out


def test_phase_grid_schema(phase_run):
    header, rows = read_csv(phase_run / "a" / "phase_grid.csv")
    assert header == [
        "J", "W", "seed", "doublon_fraction", "condensate_fraction", "entropy", "ipr", "energy_K", "energy_Vint", "energy_Vdelta"
    ]
    assert [float(r[0]) for r in rows] == [0.02, 0.0625, 0.1]
    d = np.array([[float(x) for x in r[3:]] for r in rows])
    assert np.all(np.diff(d[:, 0]) > 0)  # doublons grow with J
    assert np.all(np.diff(d[:, 1]) > 0)  # so does the condensate fraction


def test_phase_grid_plot_files(phase_run):
    hm = read_dat(phase_run / "a" / "heatmap.dat")
    assert hm.shape == (3 * 1, 5)
    text = (phase_run / "a" / "heatmap.dat").read_text()
    assert text.startswith("# ")
    decay = (phase_run / "a" / "correlator_decay.dat").read_text().split("\n\n")
    for block in filter(str.strip, decay):
        dist = read_dat_block(block)[:, 2]
        assert np.all(np.diff(dist) > 0)


def read_dat_block(text):
    return np.array([[float(x) for x in l.split()] for l in text.splitlines() if l.strip() and not l.startswith("#")])


def test_manifest_contents(phase_run):
    m = json.loads((phase_run / "a" / "manifest.json").read_text())
    assert m["failures"] == []
    assert len(m["tasks"]) == 3
    assert ExperimentConfig.from_dict(m["config"]).digest == m["config_sha256"]
    assert set(m["files"]) == {"phase_grid.csv", "heatmap.dat", "correlator_decay.dat"}


def test_manifest_rerun_reproduces(phase_run):
    out = phase_run / "b"
    assert main(["phase-grid", "--config", str(phase_run / "a" / "manifest.json"), "--out", str(out)]) == 0
    a = json.loads((phase_run / "a" / "manifest.json").read_text())["files"]
    b = json.loads((out / "manifest.json").read_text())["files"]
    assert a == b


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("DBHLAB_OUT", str(tmp_path / "env_out"))
    cfg = write_config(tmp_path, kind="phase-grid", nx=2, ny=1, J_over_U=[0.05])
    assert main(["phase-grid", "--config", str(cfg)]) == 0
    assert (tmp_path / "env_out" / "phase_grid.csv").exists()


def test_disordered_runs_are_deterministic_and_thread_independent(tmp_path):
    cfg = write_config(tmp_path, kind="phase-grid", nx=3, ny=1, J_over_U=[0.05], W_over_U=[0.0, 0.5], n_seeds=2)
    for name, threads in (("x", 1), ("y", 1), ("z", 2)):
        assert main(["phase-grid", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", "7", "--threads", str(threads)]) == 0
    ref = (tmp_path / "x" / "phase_grid.csv").read_bytes()
    assert (tmp_path / "y" / "phase_grid.csv").read_bytes() == ref
    assert (tmp_path / "z" / "phase_grid.csv").read_bytes() == ref
    _, rows = read_csv(tmp_path / "x" / "phase_grid.csv")
    assert len(rows) == 1 * 2 * 2
    m = json.loads((tmp_path / "x" / "manifest.json").read_text())
    assert {int(r[2]) for r in rows} == set(m["seeds"])
    main(["phase-grid", "--config", str(cfg), "--out", str(tmp_path / "w"), "--seed", "8"])
    assert (tmp_path / "w" / "phase_grid.csv").read_bytes() != ref


# --- other pipelines ------------------------------------------------------------------


def test_compressibility_pipeline(tmp_path):
    cfg = ExperimentConfig(
        kind="compressibility", nx=3, J_over_U=[0.0, 0.1], t_ramp=20.0, t_field=20.0, t_hold=2.0, dmu_over_U=0.02
    )
    m = run(cfg, tmp_path)
    assert m["failures"] == []
    header, rows = read_csv(tmp_path / "compressibility.csv")
    assert header == ["J", "W", "protocol", "seed", "kappa"]
    assert len(rows) == 2 * 2
    dh, drows = read_csv(tmp_path / "kappa_delta.csv")
    assert dh == ["J", "W", "kappa_FC", "kappa_ZFC", "delta_kappa"]
    r0 = [float(x) for x in drows[0]]
    assert r0[0] == 0.0 and abs(r0[2]) < 1e-8 and abs(r0[3]) < 1e-8  # atomic Mott state
    assert {"kappa_FC.dat", "kappa_ZFC.dat", "kappa_delta.dat"} <= set(m["files"])


def test_bragg_pipeline(tmp_path):
    cfg = ExperimentConfig(kind="bragg", nx=3, J_over_U=[0.1], omega_over_U=list(np.arange(0.5, 1.2, 0.05)), bragg_method="linear")
    m = run(cfg, tmp_path)
    assert m["failures"] == []
    header, rows = read_csv(tmp_path / "bragg.csv")
    assert header == ["J", "W", "seed", "p", "q", "k", "k_alt", "omega", "re_chi", "im_chi", "resonance"]
    assert float(rows[0][6]) == pytest.approx(2 * float(rows[0][5]))
    assert float(rows[0][5]) == pytest.approx(math.pi / 2)
    dat = read_dat(tmp_path / "bragg.dat")
    assert dat.shape == (len(rows), 5)
    assert set(dat[:, 4]) <= {0.0, 1.0} and dat[:, 4].sum() >= 1
    res = m["resonances"][0][-1]
    assert res is not None and 0.5 < res < 1.2


def test_tomography_bench_pipeline(tmp_path):
    m = run(ExperimentConfig(kind="tomography-bench"), tmp_path)
    header, rows = read_csv(tmp_path / "tomography_bench.csv")
    assert header[:2] == ["theta", "abs_C01"]
    assert max(float(r[4]) for r in rows) < 1e-6
    assert m["failures"] == []


def test_meanfield_pipeline(tmp_path):
    m = run(ExperimentConfig(kind="meanfield", gammas=[0.5, 1.5], k_points=5), tmp_path)
    header, rows = read_csv(tmp_path / "meanfield.csv")
    assert header == ["gamma", "J", "phi", "psi", "mu", "omega0", "c_s"]
    assert float(rows[0][3]) == 0.0 and math.isnan(float(rows[0][6]))
    assert float(rows[1][3]) > 0 and float(rows[1][6]) > 0
    assert "dispersion.dat" in m["files"]


DEVICE = dict(nqudits=2, omega_q_mhz=[6000.0, 6010.0], omega_c_mhz=8000.0, eta_q_mhz=-190.0, eta_c_mhz=-200.0, k_qc=0.0408, k_qq=0.0037)


def test_sw_derive_pipeline(tmp_path):
    m = run(ExperimentConfig(kind="sw-derive", device=DEVICE, kmax=[2, 3]), tmp_path)
    assert m["failures"] == []
    header, rows = read_csv(tmp_path / "effective_terms.csv")
    assert header == ["category", "sites", "orientation", "value_mhz"]
    cats = {r[0] for r in rows}
    assert {"J", "mu", "U"} <= cats
    U = [float(r[3]) for r in rows if r[0] == "U"]
    assert all(abs(u + 190.0) < 20.0 for u in U)
    assert set(m["convergence_khz"]) == {"3"}
    assert m["truncation_khz"]["plus"] < m["truncation_khz"]["minus"]


def test_task_failure_recorded(tmp_path, capsys):
    # a coupler resonant with a qudit cannot be eliminated
    bad = dict(DEVICE, omega_c_mhz=6000.0, k_qc=0.01)
    cfg = write_config(tmp_path, kind="sw-derive", device=bad, kmax=[3])
    with pytest.warns(RuntimeWarning):
        code = main(["sw-derive", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 1
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert len(m["failures"]) == 1 and "Ambiguous" in m["failures"][0]["error"]


def test_emit_plot_data_unknown_kind(tmp_path):
    with pytest.raises(DomainError):
        emit_plot_data({"kind": "sw-derive"}, tmp_path)
