"""Summation splatting of gridless detections and SVG rendering"""
import io

import matplotlib as mpl
import numpy as np
from matplotlib.figure import Figure

from gridless_aoa.baselines import EXPORT_FLOOR_DB
from gridless_aoa.baselines import AngularSpectrum
from gridless_aoa.simulate import db_to_linear
from gridless_aoa.utils import log

# Detections closer than this to a cell, in cells, are snapped onto it
SNAP_CELLS = 1e-9

SVG_RC = {
    'svg.hashsalt': 'gridless-aoa',
    'svg.fonttype': 'none',
    'path.simplify': False,
}


def splat(detections, grid, confidence_threshold=0.5):
    """Spread detections over a uniform angle grid with triangular weights

    The linear power lin(alpha)^2 of every detection with confidence at
    least `confidence_threshold` is shared between its two neighbouring
    cells in proportion to proximity. Detections outside the grid land on
    the nearest edge cell.

    Parameters
    ----------
    detections : DetectionSet
        Gridless detections
    grid : array_like
        Strictly increasing, uniformly spaced angles in degrees
    confidence_threshold : float
        Minimum confidence of a detection to be splatted

    Returns
    -------
    AngularSpectrum
        Splatted linear power
    """
    spectrum = AngularSpectrum(grid, np.zeros(np.size(grid)))
    grid, power = spectrum.grid, spectrum.power.copy()
    kept = detections.filter(confidence_threshold)
    if len(kept) == 0:
        return AngularSpectrum(grid, power)
    values = db_to_linear(kept.magnitudes) ** 2
    if len(grid) == 1:
        return AngularSpectrum(grid, power + values.sum())

    position = (kept.angles - grid[0]) / spectrum.step
    outside = (position < -SNAP_CELLS) | (position > len(grid) - 1 + SNAP_CELLS)
    if outside.any():
        log(
            f'Clipped {int(outside.sum())} of {len(kept)} detections outside '
            f'[{grid[0]:g}, {grid[-1]:g}] deg to the grid edges'
        )
    position = np.clip(position, 0, len(grid) - 1)
    nearest = np.round(position)
    position = np.where(np.abs(position - nearest) < SNAP_CELLS, nearest, position)

    lower = np.minimum(np.floor(position).astype(int), len(grid) - 2)
    fraction = position - lower
    np.add.at(power, lower, values * (1 - fraction))
    np.add.at(power, lower + 1, values * fraction)
    return AngularSpectrum(grid, power)


def _svg(figure):
    buffer = io.StringIO()
    with mpl.rc_context(SVG_RC):
        figure.savefig(buffer, format='svg', metadata={'Date': None})
    return buffer.getvalue()


def render_comparison(spectra, targets=(), title=None, floor_db=EXPORT_FLOOR_DB):
    """Overlay spectra in dB with the ground truth as markers

    Parameters
    ----------
    spectra : dict
        AngularSpectrum by legend label, all on one grid
    targets : list of Target
        Ground truth drawn at (angle, magnitude)
    title : str | None
        Figure title
    floor_db : float
        Lowest power drawn

    Returns
    -------
    str
        SVG document, identical for identical inputs
    """
    spectra = dict(spectra)
    if not spectra:
        msg = 'Nothing to render'
        raise ValueError(msg)
    reference = next(iter(spectra.values()))
    for label, spectrum in spectra.items():
        if not spectrum.same_grid(reference):
            msg = f'Spectrum {label!r} is not on the grid of the other spectra'
            raise ValueError(msg)

    with mpl.rc_context(SVG_RC):
        figure = Figure(figsize=(8, 4.5))
        axes = figure.add_subplot()
        for label, spectrum in spectra.items():
            axes.plot(spectrum.grid, spectrum.power_db(floor_db), label=label, lw=1)
        if len(targets):
            axes.plot(
                [t.angle for t in targets],
                [t.magnitude_db for t in targets],
                'kx',
                markersize=7,
                label='ground truth',
            )
        axes.set_xlabel('Azimuth (deg)')
        axes.set_ylabel('Power (dB)')
        axes.set_xlim(reference.grid[0], reference.grid[-1])
        axes.grid(True, alpha=0.3)
        axes.legend(loc='upper right')
        if title:
            axes.set_title(title)
        figure.tight_layout()
    return _svg(figure)


def _by_detector(reports):
    grouped = {}
    for report in reports:
        grouped.setdefault(report.detector, []).append(report)
    return grouped


def plot_pr_curves(reports):
    """PR curves, one panel per target count, one line per detector and SNR"""
    counts = sorted({report.condition.n_targets for report in reports})
    with mpl.rc_context(SVG_RC):
        figure = Figure(figsize=(4 * max(len(counts), 1), 4))
        for column, count in enumerate(counts, start=1):
            axes = figure.add_subplot(1, len(counts), column)
            for report in reports:
                if report.condition.n_targets != count:
                    continue
                recall = [r for _, _, r in report.pr_points]
                precision = [p for _, p, _ in report.pr_points]
                axes.plot(
                    recall,
                    precision,
                    lw=1,
                    label=(
                        f'{report.detector} {report.condition.snr_db:g} dB '
                        f'DR {report.condition.dynamic_range_db:g}'
                    ),
                )
            axes.set_title(f'N = {count}')
            axes.set_xlabel('Recall')
            axes.set_ylabel('Precision')
            axes.set_xlim(0, 1.02)
            axes.set_ylim(0, 1.02)
            axes.grid(True, alpha=0.3)
            axes.legend(loc='lower left', fontsize='x-small')
        figure.tight_layout()
    return _svg(figure)


def plot_condition_metrics(reports):
    """Max F1, angle and magnitude errors against the target count"""
    panels = (
        ('max_f1', 'Max F1'),
        ('mean_angle_l1_deg', 'Angle L1 (deg)'),
        ('mean_mag_l1_db', 'Magnitude L1 (dB)'),
    )
    with mpl.rc_context(SVG_RC):
        figure = Figure(figsize=(12, 4))
        for column, (field, label) in enumerate(panels, start=1):
            axes = figure.add_subplot(1, len(panels), column)
            for detector, group in _by_detector(reports).items():
                lines = {}
                for report in group:
                    key = (report.condition.snr_db, report.condition.dynamic_range_db)
                    lines.setdefault(key, []).append(report)
                for (snr, dynamic_range), line in lines.items():
                    line = sorted(line, key=lambda r: r.condition.n_targets)
                    values = [getattr(r, field) for r in line]
                    axes.plot(
                        [r.condition.n_targets for r in line],
                        [np.nan if v is None else v for v in values],
                        marker='o',
                        lw=1,
                        label=f'{detector} {snr:g} dB DR {dynamic_range:g}',
                    )
            axes.set_xlabel('Targets per scene')
            axes.set_ylabel(label)
            axes.grid(True, alpha=0.3)
        if reports:
            figure.axes[0].legend(loc='lower left', fontsize='x-small')
        figure.tight_layout()
    return _svg(figure)
