import json
import subprocess
import sys

import numpy as np
import pytest
from scipy.special import sici

from sop.cli import EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_OK, main
from sop.errors import ParseError, UnbalancedPanelError
from sop.io import FitReport, ingest_csv


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def _simulate(tmp_path, *args):
    out = tmp_path / f"{args[0]}.csv"
    assert main(["simulate", *args, "--out", str(out)]) == EXIT_OK
    return out


def _report(out_dir):
    return FitReport.from_json((out_dir / "report.json").read_text(encoding="utf-8"))


# -- ingestion --------------------------------------------------------------------------

def test_ingest_three_rows(tmp_path):
    data = ingest_csv(_write(tmp_path / "d.csv", "x,y\n0.1,1\n0.2,2\n0.3,3\n"))
    assert data.x.size == 3
    np.testing.assert_allclose(data.y, [1, 2, 3])


def test_ingest_unbalanced_panel(tmp_path):
    text = "subject,t,y\na,0,1\na,1,2\nb,0,3\n"
    with pytest.raises(UnbalancedPanelError):
        ingest_csv(_write(tmp_path / "p.csv", text), x="t", subject="subject")


def test_ingest_bad_group(tmp_path):
    text = "subject,t,y,group\na,0,1,0\na,1,2,0\nb,0,3,2\nb,1,4,2\n"
    with pytest.raises(ParseError, match="line 4"):
        ingest_csv(_write(tmp_path / "g.csv", text), x="t", subject="subject", group="group")


def test_ingest_reports_line_numbers(tmp_path):
    with pytest.raises(ParseError, match="line 3"):
        ingest_csv(_write(tmp_path / "b.csv", "x,y\n0.1,1\n0.2,abc\n"))
    with pytest.raises(ParseError, match="missing"):
        ingest_csv(_write(tmp_path / "m.csv", "x,z\n0.1,1\n"))


def test_ingest_orders_controls_first(tmp_path):
    text = "subject,t,y,group\na,0,1,1\na,1,2,1\nb,0,3,0\nb,1,4,0\n"
    data = ingest_csv(_write(tmp_path / "o.csv", text), x="t", subject="subject", group="group")
    assert data.subjects == ("b", "a")
    np.testing.assert_array_equal(data.labels, [0, 1])
    np.testing.assert_allclose(data.Y, [[3, 1], [4, 2]])


# -- simulate -----------------------------------------------------------------------------

def test_simulate_doppler(tmp_path):
    path = _simulate(tmp_path, "doppler", "--seed", "1", "--n", "1000")
    data = ingest_csv(path)
    assert data.x.size == 1000
    # E[sin(4/x)] for x ~ U[0, 1] is 4 * int_4^inf sin(u)/u^2 du = sin(4) - 4 Ci(4), about -0.21
    shift = np.sin(4.0) - 4.0 * sici(4.0)[1]
    mc_se = np.sqrt(0.5 + 0.04) / np.sqrt(1000)
    assert abs(data.y.mean() - (1.5 + shift)) < 4 * mc_se
    again = tmp_path / "again.csv"
    assert main(["simulate", "doppler", "--seed", "1", "--out", str(again)]) == EXIT_OK
    assert again.read_bytes() == path.read_bytes()


def test_simulate_requires_seed(tmp_path, capsys):
    assert main(["simulate", "doppler", "--out", str(tmp_path / "x.csv")]) == EXIT_INPUT
    assert "seed" in capsys.readouterr().err


def test_simulate_single_subject_rejected(capsys):
    assert main(["simulate", "hierarchical", "--seed", "1", "--subjects", "1"]) == EXIT_INPUT
    assert "two subjects" in capsys.readouterr().err


def test_simulate_to_stdout(capsys):
    assert main(["simulate", "poisson-peaks", "--seed", "2", "--n", "50"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "x,y" and len(lines) == 51


# -- fit ------------------------------------------------------------------------------------

def test_fit_pspline_doppler(tmp_path):
    data = _simulate(tmp_path, "doppler", "--seed", "1")
    out = tmp_path / "ps"
    assert main(["fit-pspline", str(data), "--nseg", "197", "--out", str(out)]) == EXIT_OK
    rep = _report(out)
    assert len(rep.variances) == 1 and rep.converged
    assert not (out / "lambda.csv").exists()
    curve = np.genfromtxt(out / "curve.csv", delimiter=",", names=True)
    assert curve.size == 200
    assert np.all(curve["se_lower"] <= curve["fitted"])
    assert np.all(curve["fitted"] <= curve["se_upper"])


def test_fit_adaptive_fifteen_rows(tmp_path):
    data = _simulate(tmp_path, "doppler", "--seed", "1")
    out = tmp_path / "ad"
    code = main(["fit-adaptive", str(data), "--nseg", "197", "--psi-basis", "15",
                 "--out", str(out)])
    assert code == EXIT_OK
    rep = _report(out)
    assert len(rep.variances) == 15
    assert all(row["ed_upper_bound"] is not None for row in rep.variances)
    lam = np.genfromtxt(out / "lambda.csv", delimiter=",", names=True)
    assert lam.size == 198 and np.all(lam["lambda"] > 0)


def test_fit_factor_four_rows(tmp_path):
    data = _simulate(tmp_path, "hierarchical", "--seed", "3", "--subjects", "10",
                     "--points", "30", "--groups")
    out = tmp_path / "fac"
    code = main(["fit-factor", str(data), "--pop-basis", "10", "--subj-basis", "8",
                 "--out", str(out)])
    assert code == EXIT_OK
    rep = _report(out)
    assert [r["name"] for r in rep.variances] == ["sigma2_1", "sigma2_2", "sigma2_3", "sigma2_4"]
    curve = np.genfromtxt(out / "curve.csv", delimiter=",", names=True)
    assert set(np.unique(curve["group"])) == {0, 1}


def test_fit_hierarchical(tmp_path):
    data = _simulate(tmp_path, "hierarchical", "--seed", "4", "--subjects", "6", "--points", "25")
    out = tmp_path / "h"
    assert main(["fit-hierarchical", str(data), "--pop-basis", "10", "--subj-basis", "8",
                 "--out", str(out)]) == EXIT_OK
    assert len(_report(out).variances) == 3


def test_non_convergence_exit_code_and_artifacts(tmp_path, capsys):
    data = _simulate(tmp_path, "doppler", "--seed", "1", "--n", "200")
    out = tmp_path / "nc"
    code = main(["fit-pspline", str(data), "--max-inner", "1", "--out", str(out)])
    assert code == EXIT_NOT_CONVERGED
    assert not _report(out).converged
    assert (out / "curve.csv").exists()
    assert "did not converge" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["fit-pspline", "missing.csv"],
    ["fit-pspline", "{data}", "--out", "{out}", "--family", "gamma"],
    ["fit-pspline", "{data}", "--out", "{out}", "--y-col", "nope"],
    ["fit-pspline", "{data}", "--out", "{out}", "--grid", "1"],
    ["fit-adaptive", "{data}", "--out", "{out}", "--nseg", "5", "--psi-basis", "20"],
    ["fit-hierarchical", "{data}", "--out", "{out}"],
    ["bogus"],
])
def test_input_errors_exit_one(tmp_path, argv, capsys):
    data = _write(tmp_path / "d.csv", "x,y\n" + "".join(f"{i / 30},{np.sin(i)}\n" for i in range(30)))
    argv = [a.format(data=data, out=tmp_path / "o") for a in argv]
    with_exit = None
    try:
        code = main(argv)
    except SystemExit as exc:
        with_exit = exc.code
        code = with_exit
    assert code == EXIT_INPUT
    if with_exit is None:
        assert "hint:" in capsys.readouterr().err


def test_report_round_trip(tmp_path):
    data = _simulate(tmp_path, "doppler", "--seed", "5", "--n", "300")
    out = tmp_path / "rt"
    main(["fit-adaptive", str(data), "--psi-basis", "4", "--out", str(out)])
    text = (out / "report.json").read_text(encoding="utf-8")
    rep = FitReport.from_json(text)
    assert rep.to_json() == text
    assert set(rep.timing) == {"build_seconds", "fit_seconds", "export_seconds"}
    assert rep.total_ed == pytest.approx(2 + sum(r["ed"] for r in rep.variances))


def test_report_deterministic_without_timing(tmp_path):
    data = _simulate(tmp_path, "doppler", "--seed", "6", "--n", "300")
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        main(["fit-adaptive", str(data), "--psi-basis", "5", "--out", str(out)])
        d = json.loads((out / "report.json").read_text(encoding="utf-8"))
        d.pop("timing")
        reports.append(json.dumps(d, sort_keys=True))
        assert (tmp_path / "a" / "curve.csv").read_bytes() == (out / "curve.csv").read_bytes()
    assert reports[0] == reports[1]


def test_console_script_and_logging(tmp_path):
    data = _simulate(tmp_path, "doppler", "--seed", "7", "--n", "200")
    env = {"SOP_LOG": "info", "PATH": ""}
    proc = subprocess.run([sys.executable, "-m", "sop", "fit-pspline", str(data),
                           "--out", str(tmp_path / "log")], capture_output=True, text=True,
                          env=env)
    assert proc.returncode == EXIT_OK
    assert "inner iterations" in proc.stderr
    quiet = subprocess.run([sys.executable, "-m", "sop", "fit-pspline", str(data),
                            "--out", str(tmp_path / "q")], capture_output=True, text=True,
                           env={"SOP_LOG": "quiet", "PATH": ""})
    assert quiet.returncode == EXIT_OK and quiet.stderr == ""
