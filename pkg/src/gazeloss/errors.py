"""Exception hierarchy.

Every exception carries a short machine-readable ``code`` so the CLI can emit
one parseable error line per failure.
"""


class GazeLossError(Exception):
    code = "E_GENERIC"


class DimensionError(GazeLossError, ValueError):
    code = "E_DIMENSION"


class ContractError(GazeLossError, ValueError):
    code = "E_CONTRACT"


class ConfigurationError(GazeLossError, ValueError):
    code = "E_CONFIG"


class FormatError(GazeLossError, ValueError):
    code = "E_FORMAT"


class ParseError(GazeLossError, ValueError):
    code = "E_PARSE"

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class ValidationError(GazeLossError, ValueError):
    code = "E_VALIDATION"

    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = list(rows)


class LabelIndexError(GazeLossError, IndexError):
    code = "E_INDEX"
