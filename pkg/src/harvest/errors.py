"""Exception hierarchy shared by every stage of the pipeline."""


class HarvestError(Exception):
    """Base class for domain errors; the CLI maps these to exit code 1."""


# cloud IO / containers
class MalformedHeader(HarvestError):
    pass


class InconsistentRowCount(HarvestError):
    pass


class NonFiniteValue(HarvestError):
    pass


class EmptyCloud(HarvestError):
    pass


class IoFailure(HarvestError):
    pass


class EmptyInput(HarvestError):
    pass


# perception
class DegenerateSamples(HarvestError):
    pass


class NoClusters(HarvestError):
    pass


# pose estimation
class DegenerateCluster(HarvestError):
    pass


class NoValidNormals(HarvestError):
    pass


class NoCandidatesAboveFloor(HarvestError):
    pass


# planning
class InvalidPattern(HarvestError):
    pass


class IllegalTransition(HarvestError):
    pass


# simulation / reporting
class InvalidSpec(HarvestError):
    pass


class EmptyRecords(HarvestError):
    pass


# configuration
class UnknownKey(HarvestError):
    pass


class InvariantViolation(HarvestError):
    pass
