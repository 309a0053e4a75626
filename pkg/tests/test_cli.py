import csv
import io
import json
import math

import pytest

from fcfsmatch.cli import main


@pytest.fixture
def files(tmp_path, nn, nn_unstable):
    p = tmp_path / "nn.json"
    p.write_text(json.dumps(nn.to_dict()))
    q = tmp_path / "nn-unstable.json"
    q.write_text(json.dumps(nn_unstable.to_dict()))
    bad = tmp_path / "bad.json"
    bad.write_text("{ not json")
    return str(p), str(q), str(bad), tmp_path


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_check(capsys, files):
    nn, unstable, bad, _ = files
    code, out, _ = run(capsys, "check", nn)
    assert code == 0 and "margin" in out
    code, out, _ = run(capsys, "check", unstable)
    assert code == 1 and "['s1']" in out
    code, _, err = run(capsys, "check", bad)
    assert code == 2 and "line 1" in err
    code, _, _ = run(capsys, "check", str(files[3] / "missing.json"))
    assert code == 2


def test_solve_B(capsys, files):
    code, out, _ = run(capsys, "solve", "--what", "B", files[0])
    assert code == 0
    rows = dict(r for r in csv.reader(io.StringIO(out)))
    assert rows["B"] == "0.25"
    code, out, _ = run(capsys, "solve", "--what", "B", "--format", "json", files[0])
    assert json.loads(out)["B"] == 0.25
    code, _, err = run(capsys, "solve", "--what", "B", files[1])
    assert code == 1 and "diverges" in err


def test_solve_rates(capsys, files):
    code, out, _ = run(capsys, "solve", "--what", "rates", files[0])
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["customer", "s1", "s2", "s3"]
    assert len(rows) == 4 and float(rows[1][1]) == 0.0
    assert "\r" not in out


def test_solve_linklen(capsys, files):
    code, out, _ = run(capsys, "solve", "--what", "linklen", "--server", "s1", files[0])
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["k", "pmf"]
    assert math.fsum(float(p) for _, p in rows[1:]) == pytest.approx(1.0, abs=1e-9)
    code, out, _ = run(capsys, "solve", "--what", "linklen", "--server", "s2", "--customer", "c1",
                       "--format", "json", files[0])
    doc = json.loads(out)
    assert doc["mean"] == pytest.approx(-3.0)
    code, _, err = run(capsys, "solve", "--what", "linklen", "--server", "s1", "--customer", "c1", files[0])
    assert code == 2 and "not compatible" in err
    code, _, _ = run(capsys, "solve", "--what", "linklen", files[0])
    assert code == 2
    code, _, _ = run(capsys, "solve", "--what", "linklen", "--server", "s9", files[0])
    assert code == 2


def test_solve_pi(capsys, files):
    code, out, _ = run(capsys, "solve", "--what", "pi", "--chain", "Zs", "--max-len", "2", files[0])
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["state", "pi"]
    assert rows[1] == ["∅", "0.2500000000000001"] or float(rows[1][1]) == pytest.approx(0.25)
    code, _, _ = run(capsys, "solve", "--what", "pi", "--chain", "Nope", files[0])
    assert code == 2


def test_solve_is_deterministic(capsys, files):
    a = run(capsys, "solve", "--what", "pi", "--chain", "O", "--max-len", "4", files[0])
    b = run(capsys, "solve", "--what", "pi", "--chain", "O", "--max-len", "4", files[0])
    assert a == b


def test_simulate_outputs(capsys, files):
    code, out, _ = run(capsys, "simulate", "--cycles", "50", "--seed", "3", files[0])
    assert code == 0
    lines = out.split("\n")
    assert lines[0].startswith("# seed=3 generator=")
    assert lines[1] == "m,n,customer type,server type,link length"
    again = run(capsys, "simulate", "--cycles", "50", "--seed", "3", files[0])[1]
    assert again == out
    code, out, _ = run(capsys, "simulate", "--what", "report", "--format", "json", "--cycles", "200", files[0])
    doc = json.loads(out)
    assert doc["seed"] == "1" and doc["cycles"] == 200
    code, out, _ = run(capsys, "simulate", "--what", "occupancy", "--chain", "D", "--cycles", "200",
                       "--max-len", "2", files[0])
    assert code == 0 and "∅ | ∅" in out
    code, _, _ = run(capsys, "simulate", files[1])
    assert code == 1


def test_simulate_out_file(capsys, files):
    target = files[3] / "log.csv"
    code, out, _ = run(capsys, "simulate", "--cycles", "20", "--out", str(target), files[0])
    assert code == 0 and out == ""
    assert target.read_bytes().startswith(b"# seed=1")


def test_compare(capsys, files):
    code, out, err = run(capsys, "compare", "--cycles", "20000", "--seed", "42", files[0])
    assert code == 0, err
    assert out.split("\n")[1] == "quantity,analytic,empirical,se,z,status"
    again = run(capsys, "compare", "--cycles", "20000", "--seed", "42", files[0])[1]
    assert again == out
    code, _, err = run(capsys, "compare", files[1])
    assert code == 1 and "refusing" in err


def test_compare_flags_renormalized_variant(capsys, files):
    code, out, err = run(capsys, "compare", "--cycles", "20000", "--variant", "renormalized", files[0])
    assert code == 1
    assert "first failing row" in err


def test_bad_flags(capsys, files):
    with pytest.raises(SystemExit) as exc:
        main(["solve", "--what", "nothing", files[0]])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--cycles", "0", files[0]])
    assert exc.value.code == 2
