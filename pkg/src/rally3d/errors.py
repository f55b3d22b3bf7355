"""Exception types shared across the rally3d pipeline."""


class Rally3DError(Exception):
    """Base class for all rally3d errors."""


# --- camera geometry ---

class PointBehindCamera(Rally3DError):
    """World point has non-positive depth in the camera frame."""


class RayParallelToPlane(Rally3DError):
    """Ray direction is (numerically) parallel to the target plane."""


# --- calibration ---

class DegenerateConfiguration(Rally3DError):
    """Correspondences are degenerate (e.g. collinear image points)."""


class NoConvergence(Rally3DError):
    """Iterative solver failed to produce a usable estimate."""


class ImplausiblePose(Rally3DError):
    """Estimated camera pose violates the plausibility bounds."""


class NoPlausibleOrdering(Rally3DError):
    """No corner ordering yields a plausible, unambiguous calibration."""


class EmptyStream(Rally3DError):
    """Camera tracking was given no input frames."""


# --- rally segmentation ---

class TooFewPoints(Rally3DError):
    """Not enough detections to fit a degree-2 segment."""


class NoBlurData(Rally3DError):
    """Detection carries no blur angle."""


class TrackTooShort(Rally3DError):
    """Track shorter than the minimum segment length."""


class NoIntersectionInWindow(Rally3DError):
    """Adjacent segment curves never come close inside the search window."""


# --- physics ---

class BallMovingAway(Rally3DError):
    """Bounce requested for a ball that is not approaching the table."""


class PlaneCrossing(Rally3DError):
    """Integrated trajectory crossed the table plane mid-flight.

    Carries the time bracket ``(t_before, t_after)`` of the crossing.
    """

    def __init__(self, t_before: float, t_after: float):
        self.t_before = t_before
        self.t_after = t_after
        super().__init__(
            f"trajectory crosses the table plane between t={t_before:.6f}s "
            f"and t={t_after:.6f}s"
        )


class BallLeftPlayVolume(Rally3DError):
    """Generated rally left the allowed play volume."""


# --- reconstruction ---

class AnchorOutsideTable(Rally3DError):
    """Bounce anchor falls outside the table extent plus margin."""


# --- file formats ---

class FileFormatError(Rally3DError):
    """Input file does not parse as the expected record format."""


class IdentifiabilityWarning(UserWarning):
    """Too few post-bounce observations; spin is weakly constrained."""
