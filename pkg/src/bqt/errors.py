"""Exception types shared across the engine."""


class BqtError(Exception):
    """Base class for all engine errors."""


# --- workflow graph ---


class UnknownStateRef(BqtError):
    """A transition or lookup references a state id that is not declared."""


class DuplicateTransitionLabel(BqtError):
    """Two transitions leave the same state under the same label."""


class NoTerminalReachable(BqtError):
    """No terminal state is reachable from the entry state."""


# --- perception ---


class ExtractorUnavailable(BqtError):
    """The text extraction backend cannot be reached."""


class ImageUnreadable(BqtError):
    """A snapshot image (or its ground-truth boxes) cannot be read."""


# --- synthesis / state repository ---


class SegmentationMismatch(BqtError):
    """Demonstration segments do not line up with the abstract state path."""


class NoStableKeywords(BqtError):
    """No text survives the cross-demonstration stability filter."""


class AnchorTooFar(BqtError):
    """An interacted coordinate has no usable text box close enough to anchor on."""


class StoreCorrupt(BqtError):
    """A cached state's content hash no longer matches its payload."""


# --- mock site simulator ---


class UnknownPage(BqtError):
    """A site spec references a page id that is not defined."""


class UnknownPath(BqtError):
    """A demonstration path choice is not reachable in the site spec."""


class InvalidMutation(BqtError):
    """A site mutation names a page or element that does not exist."""


# --- pipeline ---


class EmptyInput(BqtError):
    """An input table has no usable rows."""


class MissingCoverage(BqtError):
    """A sampled block group has no provider coverage rows."""


class MalformedFieldName(BqtError):
    """A raw extraction field name does not follow the plan_<i>_<attr> shape."""


class SchemaViolation(BqtError):
    """A dataset record is missing required keys or has wrongly typed values."""


# --- backend / analysis ---


class BackendError(BqtError):
    """The page backend failed while driving a session."""


class NonpositiveIncome(BqtError):
    """Median household income must be positive to form a spending threshold."""
