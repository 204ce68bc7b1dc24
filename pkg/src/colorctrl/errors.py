"""Exception hierarchy shared by every module of the package."""


class ColorCtrlError(Exception):
    """Base class for all errors raised by colorctrl."""


class ShapeError(ColorCtrlError, ValueError):
    pass


class InputError(ColorCtrlError, ValueError):
    pass


class ConfigError(ColorCtrlError, ValueError):
    pass


class ControlError(ColorCtrlError):
    """Controller and cache disagree about shapes, configuration or prompts."""


class StateError(ColorCtrlError):
    """An object was used in the wrong lifecycle state (e.g. an unfinalized cache)."""


class ScheduleError(ColorCtrlError, ValueError):
    pass


class ResourceError(ColorCtrlError):
    """A configured memory budget would be exceeded."""


class LoadError(ColorCtrlError):
    pass
