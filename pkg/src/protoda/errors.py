"""Exception types raised across the package."""


class ProtoDAError(Exception):
    pass


class CategoryMismatch(ProtoDAError):
    pass


class SampleDecodeError(ProtoDAError):
    def __init__(self, path, reason=""):
        self.path = str(path)
        super().__init__(f"cannot decode image {self.path}" + (f": {reason}" if reason else ""))


class EmptyDomain(ProtoDAError):
    pass


class TrainingDiverged(ProtoDAError):
    def __init__(self, step, value=None):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss ({value}) at step {step}")


class BackboneShapeError(ProtoDAError, ValueError):
    pass


class ShapeError(ProtoDAError, ValueError):
    pass


class DomainError(ProtoDAError, ValueError):
    pass


class AssignmentError(ProtoDAError, ValueError):
    pass


class EmptyClassError(ProtoDAError, ValueError):
    pass


class CacheMiss(ProtoDAError, KeyError):
    pass


class MissingArtifact(ProtoDAError, FileNotFoundError):
    def __init__(self, path, what="artifact"):
        self.path = str(path)
        super().__init__(f"missing {what}: expected {self.path}")


class ReportIOError(ProtoDAError, OSError):
    pass
