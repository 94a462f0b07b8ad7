import copy
from cmscan.numerics.tensor import ConfigurationError

class ConfigError(ConfigurationError):
    """Raised when a configuration file or section is invalid"""
    pass

class ConfigSection(object):
    """
    A ConfigSection is a strictly parsed group of settings. Subclasses declare their required
    keys, their optional keys with defaults and their nested sections; unknown keys are rejected
    ...

    Attributes
    ----------
    section : str
        Section name, used in error messages
    required : tuple
        Keys that must be given
    defaults : dict
        Optional keys and their default value
    nested : dict
        Keys holding a nested ConfigSection subclass

    Public Methods
    -------
    from_dict()
        Parse a dict
    to_dict()
        Fully resolved settings as a dict
    validate()
        Check values. Reimplemented by subclasses
    """

    section = 'section'
    required = ()
    defaults = dict()
    nested = dict()

    def __init__(self, **kwargs):
        allowed = set(self.required) | set(self.defaults) | set(self.nested)
        for key in kwargs:
            if key not in allowed: raise ConfigError('Unknown key ' + repr(key) + ' in section ' + repr(self.section) + ', expected one of ' + str(sorted(allowed)))
        for req_attribute in self.required:
            if req_attribute not in kwargs: raise ConfigError('Missing required key ' + repr(req_attribute) + ' in section ' + repr(self.section))
            setattr(self, req_attribute, kwargs[req_attribute])
        for key, default in self.defaults.items():
            setattr(self, key, kwargs[key] if key in kwargs else copy.deepcopy(default))
        for key, section_class in self.nested.items():
            value = kwargs.get(key, dict())
            if isinstance(value, ConfigSection): setattr(self, key, value)
            else: setattr(self, key, section_class.from_dict(value, parent=self.section))
        self.validate()

    @classmethod
    def from_dict(cls, data, parent : str = None):
        if data is None: data = dict()
        if not isinstance(data, dict):
            where = cls.section if parent is None else parent + '.' + cls.section
            raise ConfigError('Section ' + repr(where) + ' must be a JSON object, got ' + type(data).__name__)
        return cls(**data)

    def to_dict(self):
        as_dict = dict()
        for key in list(self.required) + list(self.defaults):
            as_dict[key] = getattr(self, key)
        for key in self.nested:
            as_dict[key] = getattr(self, key).to_dict()
        return as_dict

    def validate(self):
        pass

    def fail(self, message : str):
        raise ConfigError(self.section + ': ' + message)

    def check_choice(self, key : str, choices : tuple):
        if getattr(self, key) not in choices: self.fail(key + ' must be one of ' + str(choices) + ', got ' + repr(getattr(self, key)))

    def check_positive(self, key : str, allow_zero : bool = False):
        value = getattr(self, key)
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0 or (value == 0 and not allow_zero):
            self.fail(key + ' must be ' + ('>= 0' if allow_zero else '> 0') + ', got ' + repr(value))

    def __eq__(self, other):
        return isinstance(other, ConfigSection) and type(self) is type(other) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return type(self).__name__ + '(' + str(self.to_dict()) + ')'
