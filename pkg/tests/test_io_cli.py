"""Summary-file parsing/serialisation and the command-line entry points."""

import csv
import json

import numpy as np
import pytest

from robustfuse.cli import main
from robustfuse.exceptions import InvalidCovarianceError, ParseError
from robustfuse.io import (
    load_problem,
    matrix_to_tril,
    parse_summary_csv,
    parse_summary_json,
    tril_labels,
    tril_to_matrix,
    write_summary_csv,
    write_summary_json,
)
from robustfuse.model import SourceSummary

# ---------------------------------------------------------------------------
# Triangle helpers


def test_tril_labels_layout():
    assert tril_labels(3) == ["cov_11", "cov_21", "cov_22", "cov_31", "cov_32", "cov_33"]


def test_tril_round_trip():
    mat = tril_to_matrix([1.0, 0.2, 1.0], 2)
    np.testing.assert_allclose(mat, [[1.0, 0.2], [0.2, 1.0]])
    assert matrix_to_tril(mat) == [1.0, 0.2, 1.0]


def test_tril_wrong_count_raises():
    with pytest.raises(ParseError, match="expected 3"):
        tril_to_matrix([1.0, 0.2], 2)


# ---------------------------------------------------------------------------
# Round trips

_AWKWARD = [0.1, 1 / 3, -2**-40, 1.2345678901234567e-8]


def _sample_sources(with_cov=True):
    cov1 = np.array([[0.5, 0.1], [0.1, 0.3]]) if with_cov else None
    cov2 = np.array([[1e-6, 0.0], [0.0, 2e-6]]) if with_cov else None
    return [
        SourceSummary("alpha", 120, np.array(_AWKWARD[:2]), cov1),
        SourceSummary("beta", 152893, np.array(_AWKWARD[2:]), cov2),
    ]


@pytest.mark.parametrize("with_cov", [True, False])
def test_csv_round_trip_is_exact(tmp_path, with_cov):
    path = tmp_path / "sources.csv"
    original = _sample_sources(with_cov)
    write_summary_csv(path, original)
    parsed = parse_summary_csv(path)
    assert [s.source_id for s in parsed] == ["alpha", "beta"]
    assert [s.n for s in parsed] == [120, 152893]
    for a, b in zip(original, parsed):
        np.testing.assert_array_equal(a.theta, b.theta)
        if with_cov:
            np.testing.assert_array_equal(a.cov, b.cov)
        else:
            assert b.cov is None


@pytest.mark.parametrize("with_cov", [True, False])
def test_json_round_trip_is_exact(tmp_path, with_cov):
    path = tmp_path / "sources.json"
    original = _sample_sources(with_cov)
    write_summary_json(path, original)
    parsed = parse_summary_json(path)
    for a, b in zip(original, parsed):
        np.testing.assert_array_equal(a.theta, b.theta)
        if with_cov:
            np.testing.assert_array_equal(a.cov, b.cov)


def test_load_problem_infers_format(tmp_path):
    sources = _sample_sources(False)
    csv_path = tmp_path / "x.csv"
    json_path = tmp_path / "x.json"
    write_summary_csv(csv_path, sources)
    write_summary_json(json_path, sources)
    np.testing.assert_array_equal(
        load_problem(csv_path).thetas(), load_problem(json_path).thetas()
    )


def test_load_problem_explicit_format_overrides_extension(tmp_path):
    path = tmp_path / "data.txt"
    write_summary_csv(path, _sample_sources(False))
    assert load_problem(path, fmt="csv").K == 2
    with pytest.raises(ParseError):
        load_problem(path, fmt="xml")


def test_load_problem_missing_file(tmp_path):
    with pytest.raises(ParseError, match="cannot read"):
        load_problem(tmp_path / "absent.csv")


# ---------------------------------------------------------------------------
# CSV parse errors


def _write(tmp_path, text, name="bad.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_csv_rejects_wrong_header(tmp_path):
    with pytest.raises(ParseError, match="source_id"):
        parse_summary_csv(_write(tmp_path, "id,n,theta_1\na,10,1.0\n"))


def test_csv_rejects_missing_theta_columns(tmp_path):
    with pytest.raises(ParseError, match="theta_1"):
        parse_summary_csv(_write(tmp_path, "source_id,n,value\na,10,1.0\n"))


def test_csv_rejects_mislabelled_cov_columns(tmp_path):
    text = "source_id,n,theta_1,cov_12\na,10,1.0,1.0\n"
    with pytest.raises(ParseError, match="covariance columns"):
        parse_summary_csv(_write(tmp_path, text))


def test_csv_reports_record_number_for_ragged_row(tmp_path):
    text = "source_id,n,theta_1\na,10,1.0\nb,20\n"
    with pytest.raises(ParseError) as info:
        parse_summary_csv(_write(tmp_path, text))
    assert info.value.record == 2


def test_csv_reports_record_number_for_bad_number(tmp_path):
    text = "source_id,n,theta_1\na,10,1.0\nb,20,oops\n"
    with pytest.raises(ParseError, match="theta_1") as info:
        parse_summary_csv(_write(tmp_path, text))
    assert info.value.record == 2


def test_csv_rejects_bad_sample_sizes(tmp_path):
    for bad in ["0", "-3", "2.5", "inf"]:
        with pytest.raises(ParseError, match="sample size"):
            parse_summary_csv(_write(tmp_path, f"source_id,n,theta_1\na,{bad},1.0\n"))


def test_csv_rejects_nonfinite_theta(tmp_path):
    with pytest.raises(ParseError, match="finite"):
        parse_summary_csv(_write(tmp_path, "source_id,n,theta_1\na,10,nan\n"))


def test_csv_rejects_empty_inputs(tmp_path):
    with pytest.raises(ParseError, match="empty file"):
        parse_summary_csv(_write(tmp_path, ""))
    with pytest.raises(ParseError, match="no data records"):
        parse_summary_csv(_write(tmp_path, "source_id,n,theta_1\n\n"))
    with pytest.raises(ParseError, match="empty source_id"):
        parse_summary_csv(_write(tmp_path, "source_id,n,theta_1\n ,10,1.0\n"))


def test_csv_skips_blank_lines(tmp_path):
    text = "source_id,n,theta_1\n\na,10,1.0\n\nb,20,2.0\n"
    assert len(parse_summary_csv(_write(tmp_path, text))) == 2


def test_indefinite_cov_triangle_names_the_source(tmp_path):
    # Triangle (1, 2, 1) expands to [[1, 2], [2, 1]] with eigenvalues 3, -1.
    text = (
        "source_id,n,theta_1,theta_2,cov_11,cov_21,cov_22\n"
        "good,10,0.0,0.0,1.0,0.2,1.0\n"
        "evil,10,0.0,0.0,1.0,2.0,1.0\n"
    )
    with pytest.raises(InvalidCovarianceError, match="'evil'"):
        parse_summary_csv(_write(tmp_path, text))


# ---------------------------------------------------------------------------
# JSON parse errors


def test_json_rejects_invalid_document(tmp_path):
    with pytest.raises(ParseError, match="invalid JSON"):
        parse_summary_json(_write(tmp_path, "{not json", "bad.json"))
    with pytest.raises(ParseError, match="non-empty JSON array"):
        parse_summary_json(_write(tmp_path, "{}", "obj.json"))


def test_json_rejects_bad_records(tmp_path):
    with pytest.raises(ParseError, match="not an object"):
        parse_summary_json(_write(tmp_path, "[1]", "a.json"))
    with pytest.raises(ParseError, match="missing keys"):
        parse_summary_json(_write(tmp_path, '[{"id": "a", "n": 10}]', "b.json"))
    with pytest.raises(ParseError, match="theta must be"):
        parse_summary_json(_write(tmp_path, '[{"id": "a", "n": 10, "theta": 1.0}]', "c.json"))


def test_json_reports_record_number_for_bad_triangle(tmp_path):
    doc = [
        {"id": "a", "n": 10, "theta": [0.0, 0.0], "cov_tril": [1.0, 0.1, 1.0]},
        {"id": "b", "n": 10, "theta": [0.0, 0.0], "cov_tril": [1.0, 0.1]},
    ]
    with pytest.raises(ParseError) as info:
        parse_summary_json(_write(tmp_path, json.dumps(doc), "d.json"))
    assert info.value.record == 2


# ---------------------------------------------------------------------------
# CLI: fuse

# Six equally sized sources around zero; only the first two are unbiased, the
# other four sit at partially cancelling offsets, so the pooled stage must
# keep exactly the first two.
_TOY_ROWS = [
    ("u1", 10000, (0.0004, -0.0007, 0.0002)),
    ("u2", 10000, (-0.0003, 0.0009, -0.0005)),
    ("b1", 10000, (1.0006, 0.0003, -0.0008)),
    ("b2", 10000, (-1.9992, -0.0006, 0.0004)),
    ("b3", 10000, (0.0007, 1.0004, -0.0003)),
    ("b4", 10000, (-0.0002, 0.0008, 0.9991)),
]


def _write_toy(tmp_path, with_cov=True):
    path = tmp_path / "toy.csv"
    header = ["source_id", "n", "theta_1", "theta_2", "theta_3"]
    if with_cov:
        header += tril_labels(3)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for sid, n, theta in _TOY_ROWS:
            row = [sid, n, *theta]
            if with_cov:
                row += [1e-6, 0.0, 1e-6, 0.0, 0.0, 1e-6]
            writer.writerow(row)
    return path


def test_fuse_single_source_returns_it(tmp_path, capsys):
    path = _write(tmp_path, "source_id,n,theta_1,theta_2\nonly,50,1.25,-0.5\n", "one.csv")
    assert main(["fuse", str(path)]) == 0
    out = capsys.readouterr().out
    assert "1.25" in out and "pooled sources (1/1): only" in out


def test_fuse_toy_keeps_the_unbiased_pair(tmp_path, capsys):
    path = _write_toy(tmp_path)
    prefix = tmp_path / "report"
    assert main(["fuse", str(path), "--output", str(prefix)]) == 0
    out = capsys.readouterr().out
    assert "pooled sources (2/6): u1, u2" in out
    assert "weighting: identity" in out

    with open(f"{prefix}.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    for row in rows:
        assert abs(float(row["estimate"])) < 0.01
        assert row["se"] != "" and float(row["lower"]) < float(row["upper"])

    with open(f"{prefix}_sources.csv") as fh:
        src_rows = list(csv.DictReader(fh))
    assert [r["pooled"] for r in src_rows] == ["1", "1", "0", "0", "0", "0"]
    assert float(src_rows[2]["bias_norm"]) > 0.5

    assert (tmp_path / "report.png").exists()


def test_fuse_no_figure_skips_png(tmp_path):
    path = _write_toy(tmp_path)
    prefix = tmp_path / "nofig"
    assert main(["fuse", str(path), "--output", str(prefix), "--no-figure"]) == 0
    assert (tmp_path / "nofig.csv").exists()
    assert not (tmp_path / "nofig.png").exists()


def test_fuse_without_covariance_skips_intervals(tmp_path, capsys):
    path = _write_toy(tmp_path, with_cov=False)
    prefix = tmp_path / "nocov"
    assert main(["fuse", str(path), "--output", str(prefix), "--no-figure"]) == 0
    err = capsys.readouterr().err
    assert "intervals skipped" in err
    with open(f"{prefix}.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert all(row["se"] == "" for row in rows)


def test_fuse_weighting_choices_both_converge(tmp_path, capsys):
    path = _write_toy(tmp_path)
    for vk in ("identity", "invcov"):
        assert main(["fuse", str(path), "--vk", vk]) == 0
        assert f"weighting: {vk}" in capsys.readouterr().out


def test_fuse_json_input(tmp_path, capsys):
    sources = [
        SourceSummary(sid, n, np.array(theta), 1e-6 * np.eye(3))
        for sid, n, theta in _TOY_ROWS
    ]
    path = tmp_path / "toy.json"
    write_summary_json(path, sources)
    assert main(["fuse", str(path)]) == 0
    assert "pooled sources (2/6): u1, u2" in capsys.readouterr().out


def test_fuse_nonconvergence_exits_two(tmp_path, capsys):
    path = _write_toy(tmp_path)
    code = main(["fuse", str(path), "--max-iter", "1"])
    assert code == 2
    captured = capsys.readouterr()
    assert "warning" in captured.err
    assert "fused estimate" in captured.out  # best iterate still reported


def test_fuse_bad_input_exits_one(tmp_path, capsys):
    path = _write(tmp_path, "source_id,n\na,10\n")
    assert main(["fuse", str(path)]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["fuse", str(tmp_path / "nope.csv")]) == 1


# ---------------------------------------------------------------------------
# CLI: simulate


def test_simulate_writes_metrics_and_figure(tmp_path, capsys):
    out = tmp_path / "metrics.csv"
    args = [
        "simulate", "table1", "--nstar", "30", "--reps", "2",
        "--seed", "3", "--out", str(out),
    ]
    assert main(args) == 0
    assert "penalized" in capsys.readouterr().out
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [r["estimator"] for r in rows] == list(
        ("naive", "ivw", "oracle", "initial", "penalized")
    )
    assert (tmp_path / "metrics.png").exists()

    # Same command, same seed: identical bytes.
    first = out.read_bytes()
    assert main(args) == 0
    capsys.readouterr()
    assert out.read_bytes() == first


def test_simulate_no_figure(tmp_path, capsys):
    out = tmp_path / "m.csv"
    assert main(["simulate", "table2", "--nstar", "30", "--reps", "2",
                 "--out", str(out), "--no-figure"]) == 0
    capsys.readouterr()
    assert out.exists()
    assert not (tmp_path / "m.png").exists()


def test_simulate_counterexample_subcommand(tmp_path, capsys):
    out = tmp_path / "ce.csv"
    assert main(["simulate", "counterexample", "--K", "4", "--n", "400",
                 "--tau", "0.1", "--reps", "5", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "exceedance rate" in text
    with open(out) as fh:
        row = next(csv.DictReader(fh))
    assert 0.0 <= float(row["exceedance_rate"]) <= 1.0
    assert (tmp_path / "ce.png").exists()


def test_simulate_rejects_unknown_design(capsys):
    with pytest.raises(SystemExit):
        main(["simulate", "table9"])
    capsys.readouterr()


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert "robustfuse" in capsys.readouterr().out
