"""Exception types raised across the toolkit."""


class BlockLocError(Exception):
    """Base class; ``code`` is the machine-readable name used by the CLI."""

    code = "error"


class NearPiRotation(BlockLocError):
    code = "near_pi_rotation"


class InvalidAlpha(BlockLocError):
    code = "invalid_alpha"


class NoInput(BlockLocError):
    code = "no_input"


class PoseGap(BlockLocError):
    code = "pose_gap"


class NoBlocks(BlockLocError):
    code = "no_blocks"


class FormatError(BlockLocError):
    code = "format_error"


class ServerUnavailable(BlockLocError):
    code = "server_unavailable"


class ServerError(BlockLocError):
    """Error frame returned by the map server."""

    code = "server_error"

    def __init__(self, error_code: int, message: str):
        super().__init__(f"server error {error_code}: {message}")
        self.error_code = error_code
        self.message = message


class EmptySlice(BlockLocError):
    code = "empty_slice"


class NoInitialPose(BlockLocError):
    code = "no_initial_pose"


class BadImuStream(BlockLocError):
    code = "bad_imu_stream"


class TrackingLost(BlockLocError):
    code = "tracking_lost"

    def __init__(self, message: str, last_pose=None):
        super().__init__(message)
        self.last_pose = last_pose


class Underconstrained(BlockLocError):
    code = "underconstrained"


class DegenerateMarginalization(BlockLocError):
    code = "degenerate_marginalization"


class OutOfWorld(BlockLocError):
    code = "out_of_world"


class InsufficientOverlap(BlockLocError):
    code = "insufficient_overlap"


class ConfigError(BlockLocError):
    code = "config_error"
