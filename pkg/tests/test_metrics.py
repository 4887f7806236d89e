import numpy as np
import pandas as pd
import pytest

from bgldown.services.gridded_io import GridSpec
from bgldown.services.metrics_service import (
    REPORT_COLUMNS,
    build_report,
    extract_window,
    mse,
    mse_ratio_map,
    percent_reduction,
    read_map,
    ssim,
    write_map,
    write_pgm,
    write_report,
)
from bgldown.utils.errors import MaskedPixel, ShapeMismatch, WindowTooLarge
from conftest import fine_field


def test_mse_identities(rng):
    truth = fine_field(rng.standard_normal((24, 12)), 4, 3)
    assert mse(truth, truth) == 0.0
    shifted = fine_field(truth.values + 0.5, 4, 3)
    assert mse(shifted, truth) == pytest.approx(0.25)
    assert all(v == pytest.approx(0.25) for v in mse(shifted, truth, "season").values())
    np.testing.assert_allclose(mse(shifted, truth, "pixel"), 0.25)


def test_season_and_overall_agree(rng):
    truth = fine_field(rng.standard_normal((20, 6)), 3, 2, start=(2000, 3))
    pred = fine_field(rng.standard_normal((20, 6)), 3, 2, start=(2000, 3))
    by_season = mse(pred, truth, "season")
    counts = {s: truth.time.season_positions(s).size for s in by_season}
    weighted = sum(by_season[s] * counts[s] for s in by_season) / sum(counts.values())
    assert weighted == pytest.approx(mse(pred, truth), rel=1e-12)


def test_mse_needs_matching_months(rng):
    truth = fine_field(rng.standard_normal((3, 4)), 2, 2)
    with pytest.raises(ShapeMismatch):
        mse(fine_field(truth.values, 2, 2, start=(2001, 1)), truth)


def test_ssim_of_identical_maps(rng):
    x = rng.standard_normal((16, 16))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(np.full((8, 8), 3.0), np.full((8, 8), 3.0)) == pytest.approx(1.0)


def test_ssim_matches_direct_formula(rng):
    x = rng.standard_normal((32, 32))
    y = 0.6 * x + rng.standard_normal((32, 32))
    c1, c2 = (0.01 * np.ptp(y)) ** 2, (0.03 * np.ptp(y)) ** 2
    values = []
    for i in range(32 - 8 + 1):
        for j in range(32 - 8 + 1):
            a, b = x[i:i + 8, j:j + 8], y[i:i + 8, j:j + 8]
            cov = np.mean((a - a.mean()) * (b - b.mean()))
            values.append(((2 * a.mean() * b.mean() + c1) * (2 * cov + c2))
                          / ((a.mean() ** 2 + b.mean() ** 2 + c1) * (a.var() + b.var() + c2)))
    assert ssim(x, y) == pytest.approx(np.mean(values), rel=1e-10)
    assert ssim(x, y) < 1.0


def test_ssim_errors():
    with pytest.raises(WindowTooLarge):
        ssim(np.zeros((7, 10)), np.zeros((7, 10)))
    holey = np.zeros((8, 8))
    holey[3, 3] = np.nan
    with pytest.raises(MaskedPixel):
        ssim(holey, np.zeros((8, 8)))
    with pytest.raises(ShapeMismatch):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))


def test_window_with_masked_cell(rng):
    mask = np.ones(100, dtype=bool)
    mask[55] = False
    fld = fine_field(rng.standard_normal((1, 99)), 10, 10, mask=mask)
    with pytest.raises(MaskedPixel):
        extract_window(fld, 0)
    assert extract_window(fld, 0, (0, 4, 0, 10)).shape == (4, 10)


def test_ratio_map_cases():
    ratio = mse_ratio_map(np.array([1.0, 0.0, 2.0]), np.array([2.0, 0.0, 0.0]))
    np.testing.assert_array_equal(ratio.values, [0.5, 1.0, np.inf])
    np.testing.assert_array_equal(ratio.flagged, [False, False, True])


def test_report_rows_and_files(tmp_path, rng):
    truth = fine_field(rng.standard_normal((12, 64)), 8, 8, start=(2010, 1))
    gcm = fine_field(truth.values + rng.standard_normal((12, 64)), 8, 8, start=(2010, 1))
    bgl = fine_field(truth.values + 0.1 * rng.standard_normal((12, 64)), 8, 8, start=(2010, 1))
    report = build_report(truth, {"GCM": gcm, "BGL": bgl}, ratio_pairs=[("BGL", "GCM")])
    assert len(report.rows) == 10
    assert report.value("BGL") < report.value("GCM")
    assert report.value("BGL", column="ssim") > report.value("GCM", column="ssim")
    summer = [row for row in report.rows if row["season"] == "summer"]
    assert all(row["n_months"] == 3 for row in summer)

    csv_path = write_report(report, tmp_path)
    frame = pd.read_csv(csv_path)
    assert list(frame.columns) == REPORT_COLUMNS
    assert (tmp_path / "maps" / "BGL_over_GCM.ratio.gsf").exists()
    values, grid = read_map(tmp_path / "maps" / "GCM.mse.gsf")
    np.testing.assert_allclose(values, report.pixel_mse["GCM"])
    assert grid.same_layout(truth.spec)


def test_report_without_ssim(rng):
    truth = fine_field(rng.standard_normal((2, 4)), 2, 2)
    report = build_report(truth, {"GCM": truth}, ssim_enabled=False)
    assert np.isnan(report.value("GCM", column="ssim"))
    assert report.value("GCM") == 0.0


def test_report_percent_reduction(tmp_path):
    truth = fine_field(np.zeros((3, 4)), 2, 2)
    standard = fine_field(np.full((3, 4), 2.0), 2, 2)
    bgl = fine_field(np.ones((3, 4)), 2, 2)
    report = build_report(truth, {"Standard": standard, "BGL": bgl}, ssim_enabled=False)
    assert report.value("BGL", column="pct_reduction_vs_Standard") == pytest.approx(75.0)
    assert report.value("Standard", column="pct_reduction_vs_Standard") == 0.0
    assert np.isnan(report.value("BGL", column="pct_reduction_vs_GCM"))
    frame = pd.read_csv(write_report(report, tmp_path))
    row = frame[(frame["method"] == "BGL") & (frame["season"] == "overall")]
    assert row["pct_reduction_vs_Standard"].iloc[0] == pytest.approx(75.0)
    assert np.isnan(percent_reduction(1.0, 0.0))


def test_map_keeps_infinity(tmp_path):
    grid = GridSpec.full("fine", 0.0, 0.0, 1.0, 1.0, 3, 1)
    write_map(np.array([1.0, np.inf, 0.5]), grid, tmp_path / "r.gsf", "ratio")
    values, _ = read_map(tmp_path / "r.gsf")
    assert np.isinf(values[1])


def test_pgm_heatmap(tmp_path):
    mask = np.array([1, 1, 0, 1], dtype=bool)
    grid = GridSpec("fine", 0.0, 0.0, 1.0, 1.0, 2, 2, mask)
    write_pgm(np.array([0.0, 1.0, 2.0]), grid, tmp_path / "m.pgm")
    raw = (tmp_path / "m.pgm").read_bytes()
    header = b"P5\n2 2\n255\n"
    assert raw.startswith(header)
    assert list(raw[len(header):]) == [1, 128, 0, 255]
