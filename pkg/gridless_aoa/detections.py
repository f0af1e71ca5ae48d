"""Gridless detection sets shared by every detector"""
from dataclasses import dataclass

import numpy as np

# Confidences are kept strictly inside (0, 1)
CONFIDENCE_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class DetectionSet:
    """Detections of one scene

    Parameters
    ----------
    angles : array_like
        Azimuths in degrees
    magnitudes : array_like
        Magnitudes in dB (20 log10 of linear amplitude)
    confidences : array_like
        Detection confidences strictly inside (0, 1)
    """

    angles: np.ndarray
    magnitudes: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        fields = {}
        for name in ('angles', 'magnitudes', 'confidences'):
            values = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if values.ndim != 1:
                msg = f'Detection {name} must be one dimensional'
                raise ValueError(msg)
            if not np.all(np.isfinite(values)):
                msg = f'Detection {name} must be finite'
                raise ValueError(msg)
            fields[name] = values
        if not len(fields['angles']) == len(fields['magnitudes']) == len(
            fields['confidences']
        ):
            msg = 'Detection angles, magnitudes and confidences differ in length'
            raise ValueError(msg)
        conf = fields['confidences']
        if np.any((conf <= 0) | (conf >= 1)):
            msg = 'Detection confidences must lie strictly inside (0, 1)'
            raise ValueError(msg)
        for name, values in fields.items():
            values.setflags(write=False)
            object.__setattr__(self, name, values)

    def __len__(self):
        return len(self.angles)

    @classmethod
    def empty(cls):
        return cls(np.empty(0), np.empty(0), np.empty(0))

    def select(self, index):
        """Detections at `index` (boolean mask or integer positions)"""
        return DetectionSet(
            self.angles[index], self.magnitudes[index], self.confidences[index]
        )

    def filter(self, threshold):
        """Detections whose confidence is at least `threshold`"""
        return self.select(self.confidences >= threshold)

    def sorted(self):
        """Detections ordered by descending confidence, ties keep their order"""
        return self.select(np.argsort(-self.confidences, kind='stable'))

    def to_records(self):
        return [
            {'angle_deg': a, 'mag_db': m, 'confidence': c}
            for a, m, c in zip(
                self.angles.tolist(),
                self.magnitudes.tolist(),
                self.confidences.tolist(),
            )
        ]


def clip_confidences(values):
    """Clip probabilities into the open interval (0, 1)"""
    return np.clip(np.asarray(values, dtype=float), CONFIDENCE_EPS, 1 - CONFIDENCE_EPS)
