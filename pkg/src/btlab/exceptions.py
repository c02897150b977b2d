"""Error taxonomy shared across the package.

ConfigError covers bad wiring (shape mismatches, invalid settings) and maps
to CLI exit code 2; PipelineError covers stage failures at run time and maps
to exit code 3.
"""


class BtlabError(Exception):
    pass


class ConfigError(BtlabError):
    pass


class InputError(BtlabError):
    pass


class NumericError(BtlabError):
    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class ParseError(BtlabError):
    def __init__(self, message: str, line: int | None = None, column: str | None = None):
        super().__init__(message)
        self.line = line
        self.column = column


class SingularMatrixError(BtlabError):
    def __init__(self, message: str, condition: float | None = None):
        super().__init__(message)
        self.condition = condition


class PipelineError(BtlabError):
    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage
