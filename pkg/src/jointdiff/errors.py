"""Error taxonomy shared across the package.

InputError     bad values handed in by a caller or user (exit code 1 territory
               when it comes from the command line, 2 when from data files)
ConfigError    an impossible configuration (e.g. attention row with no
               admissible key, more colors than codebook entries)
ContractError  an internal precondition was violated by calling code
FormatError    persisted artifact (dataset / checkpoint) is incompatible
               or corrupt
DecodeFailure  a decode run ended in a state that should be unreachable
"""


class InputError(ValueError):
    pass


class ConfigError(RuntimeError):
    pass


class ContractError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


class DecodeFailure(RuntimeError):
    pass
