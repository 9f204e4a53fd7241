"""Exception hierarchy shared by all inferkit modules."""


class InferkitError(Exception):
    """Base class for every error raised by inferkit."""


class InputError(InferkitError, ValueError):
    """Caller passed invalid data (non-finite weights, empty prompts, ...)."""


class SchemeError(InferkitError, ValueError):
    """A quantization scheme cannot encode the given block."""


class DecodeError(InferkitError, ValueError):
    """A packed buffer holds values outside the scheme's code range."""


class ShapeError(InferkitError, ValueError):
    pass


class SpecError(InferkitError, ValueError):
    """Model specification could not be parsed or validated."""


class UnsupportedBlockError(SpecError):
    def __init__(self, key: str, value: str):
        super().__init__(f"unsupported building block: {key} (got {value!r})")
        self.key = key
        self.value = value


class UnmappedTensorError(SpecError):
    def __init__(self, name: str):
        super().__init__(f"unmapped tensor: {name}")
        self.name = name


class CheckpointError(InferkitError):
    pass


class ParseError(CheckpointError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UnsupportedDtypeError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


class ConfigurationError(InferkitError):
    """Operation does not apply to this network type."""


class ContextOverflowError(InferkitError):
    pass


class PlanningError(InferkitError, ValueError):
    pass
