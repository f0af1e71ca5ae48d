"""Tests for splatting and SVG rendering"""
import numpy as np
from pytest import approx
from pytest import raises

from gridless_aoa.baselines import AngularSpectrum
from gridless_aoa.baselines import write_spectrum_csv
from gridless_aoa.detections import DetectionSet
from gridless_aoa.evaluate import evaluate_detections
from gridless_aoa.render import *

GRID = np.linspace(-10, 10, 21)


def test_splat_between_cells():
    """Test a detection halfway between two cells splits its power evenly"""
    spectrum = splat(DetectionSet([0.5], [0.0], [0.9]), GRID)
    assert spectrum.power[10] == approx(0.5)
    assert spectrum.power[11] == approx(0.5)
    assert spectrum.power.sum() == approx(1.0)


def test_splat_on_grid():
    """Test a detection on a cell puts all of its power there"""
    spectrum = splat(DetectionSet([3.0], [-6.0], [0.9]), GRID)
    assert spectrum.power[13] == approx(10 ** -0.6)
    assert np.count_nonzero(spectrum.power) == 1


def test_splat_last_cell():
    spectrum = splat(DetectionSet([10.0], [0.0], [0.9]), GRID)
    assert spectrum.power[-1] == approx(1.0)


def test_splat_sums_coincident_detections():
    detections = DetectionSet([2.25, 2.25, -4.0], [0.0, 0.0, 0.0], [0.9, 0.8, 0.7])
    spectrum = splat(detections, GRID)
    assert spectrum.power[12] == approx(1.5)
    assert spectrum.power[13] == approx(0.5)
    assert spectrum.power.sum() == approx(3.0)


def random_detections(rng, count):
    return DetectionSet(
        rng.uniform(-10, 10, count),
        rng.uniform(-30, 10, count),
        rng.uniform(0.5, 0.99, count),
    )


def test_splat_conserves_power(rng):
    """Test the splatted spectrum holds the summed linear power of the detections"""
    for _ in range(100):
        detections = random_detections(rng, rng.integers(1, 12))
        spectrum = splat(detections, GRID)
        assert spectrum.power.sum() == approx(np.sum(10 ** (detections.magnitudes / 10)))
        assert np.all(spectrum.power >= 0)


def test_splat_linearity(rng):
    """Test splatting a union of detections adds their spectra"""
    for _ in range(50):
        first = random_detections(rng, rng.integers(1, 6))
        second = random_detections(rng, rng.integers(1, 6))
        union = DetectionSet(
            np.concatenate([first.angles, second.angles]),
            np.concatenate([first.magnitudes, second.magnitudes]),
            np.concatenate([first.confidences, second.confidences]),
        )
        expected = splat(first, GRID).power + splat(second, GRID).power
        assert splat(union, GRID).power == approx(expected, rel=1e-12, abs=1e-15)


def test_splat_confidence_threshold():
    detections = DetectionSet([0.0, 5.0], [0.0, 0.0], [0.4, 0.5])
    spectrum = splat(detections, GRID, confidence_threshold=0.5)
    assert spectrum.power[10] == 0.0
    assert spectrum.power[15] == approx(1.0)
    assert not splat(detections, GRID, confidence_threshold=0.9).power.any()


def test_splat_clips_to_grid(capsys):
    """Test detections outside the grid land on the edge cells"""
    detections = DetectionSet([-30.0, 40.0], [0.0, 0.0], [0.9, 0.9])
    spectrum = splat(detections, GRID)
    assert spectrum.power[0] == approx(1.0)
    assert spectrum.power[-1] == approx(1.0)
    assert 'Clipped 2 of 2' in capsys.readouterr().err


def test_splat_single_cell():
    spectrum = splat(DetectionSet([1.0, 2.0], [0.0, 0.0], [0.9, 0.9]), [0.0])
    assert spectrum.power.tolist() == [2.0]


def test_splat_rejects_bad_grid():
    with raises(ValueError):
        splat(DetectionSet.empty(), [0.0, 1.0, 3.0])


def test_splat_csv(file_regression):
    """Test the exported CSV of a splatted detection"""
    spectrum = splat(DetectionSet([0.5], [0.0], [0.9]), [-1.0, 0.0, 1.0])
    file_regression.check(write_spectrum_csv(spectrum), extension='.csv')


def test_render_comparison(make_targets):
    """Test the SVG is deterministic and names every curve"""
    spectra = {
        'IAA': AngularSpectrum(GRID, np.linspace(0.1, 1.0, 21)),
        'transformer (splat)': splat(DetectionSet([0.5], [0.0], [0.9]), GRID),
    }
    targets = make_targets((0.5, 0.0))
    svg = render_comparison(spectra, targets, title='scene 3')
    assert svg.lstrip().startswith('<?xml')
    assert 'transformer (splat)' in svg
    assert 'ground truth' in svg
    assert 'scene 3' in svg
    assert svg == render_comparison(spectra, targets, title='scene 3')


def test_render_comparison_errors():
    with raises(ValueError):
        render_comparison({})
    with raises(ValueError):
        render_comparison(
            {
                'a': AngularSpectrum(GRID, np.ones(21)),
                'b': AngularSpectrum(GRID[:-1], np.ones(20)),
            }
        )


def test_plot_reports(make_targets):
    """Test PR and metric figures render, with missing errors left blank"""
    detections = [DetectionSet([30.0], [0.0], [0.9])]
    reports = [
        evaluate_detections(
            detections, [make_targets((0.0, 0.0), (5.0, 0.0))], (20.0, n, 13.0), 'iaa', 11
        )
        for n in (2, 4)
    ]
    assert reports[0].mean_angle_l1_deg is None
    assert 'N = 4' in plot_pr_curves(reports)
    assert 'Max F1' in plot_condition_metrics(reports)
    assert plot_condition_metrics([]).lstrip().startswith('<?xml')
