"""Exception types shared across the package."""


class FedVisRecError(Exception):
    """Base class for all domain errors."""


# --- tensor/autodiff ---

class ShapeMismatch(FedVisRecError):
    pass


class NonBinaryLabel(FedVisRecError):
    pass


class NotScalarLoss(FedVisRecError):
    pass


# --- data ingestion ---

class MalformedLine(FedVisRecError):
    def __init__(self, line_no, reason=""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {reason}" if reason else f"line {line_no}")


class EmptyDataset(FedVisRecError):
    pass


class DuplicateInteraction(FedVisRecError):
    pass


class InsufficientNegatives(FedVisRecError):
    pass


class UnsupportedFormat(FedVisRecError):
    pass


class DimensionMismatch(FedVisRecError):
    pass


class InfeasibleDensity(FedVisRecError):
    pass


class TooFewPositives(FedVisRecError):
    def __init__(self, user_id):
        self.user_id = user_id
        super().__init__(f"user {user_id} has too few positives for a held-out split")


# --- models / federation ---

class UnknownItem(FedVisRecError):
    pass


class EmptyLocalData(FedVisRecError):
    pass


class StaleUpload(FedVisRecError):
    pass


class DivergedRun(FedVisRecError):
    def __init__(self, epoch):
        self.epoch = epoch
        super().__init__(f"public parameters became non-finite at epoch {epoch}")


class NotTargetOwner(FedVisRecError):
    pass


class NoEligibleUsers(FedVisRecError):
    pass


class MissingSplit(FedVisRecError):
    pass


# --- diffusion defense ---

class InvalidScheduleBounds(FedVisRecError):
    pass


class StepOutOfRange(FedVisRecError):
    pass


class EmptyCorpus(FedVisRecError):
    pass


class ZeroFeatureVector(FedVisRecError):
    pass


# --- harness ---

class ConfigParseError(FedVisRecError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")
