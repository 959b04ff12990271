"""Exception types raised across the package."""


class DeformcastError(Exception):
    """Base class for every error raised by deformcast."""

    code = "deformcast-error"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class InvalidArgumentError(DeformcastError, ValueError):
    code = "invalid-argument"


class MeshParseError(DeformcastError, ValueError):
    code = "parse-error"

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")

    def to_dict(self):
        return {**super().to_dict(), "path": self.path, "line": self.line}


class DegenerateFaceError(DeformcastError, ValueError):
    code = "degenerate-face"

    def __init__(self, face_index, face):
        self.face_index = face_index
        super().__init__(f"face {face_index} repeats a vertex index: {tuple(face)}")


class DegenerateGeometryError(DeformcastError, ValueError):
    code = "degenerate-geometry"


class ShapeMismatchError(DeformcastError, ValueError):
    code = "shape-mismatch"


class NumericFaultError(DeformcastError, FloatingPointError):
    code = "numeric-fault"


class GradientStateError(DeformcastError, RuntimeError):
    code = "gradients-already-materialized"


class UnstableScenarioError(DeformcastError, RuntimeError):
    code = "unstable-scenario"

    def __init__(self, seed, message):
        self.seed = seed
        super().__init__(f"scenario seed {seed}: {message}")

    def to_dict(self):
        return {**super().to_dict(), "seed": self.seed}


class SchemaViolationError(DeformcastError, ValueError):
    code = "schema-violation"

    def __init__(self, field, message=None):
        self.field = field
        super().__init__(message or f"missing or malformed field {field!r}")

    def to_dict(self):
        return {**super().to_dict(), "field": self.field}


class InvariantViolationError(DeformcastError, ValueError):
    code = "invariant-violation"


class SkipSample(DeformcastError):
    """Signal that a sample cannot produce a training instance."""

    code = "skip-sample"


class WidthMismatchError(DeformcastError, ValueError):
    code = "width-mismatch"
