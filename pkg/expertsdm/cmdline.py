import shlex
import re
import os.path
import logging

from expertsdm.exceptions import InputError

CASTS = {"int": int, "float": float}

class ArgSpec:
    """One declared option or positional argument of a command.

    arity is "0" (flag), "1", "?", "*" or "+".
    """

    def __init__(self, names, option=False, arity="1", default=None, cast=None, preprocess=None):
        if cast is not None and cast not in CASTS:
            raise ValueError(f"Unknown cast {cast}")
        self.names = list(names)
        self.name = self.names[0]
        self.key = re.sub(r'\W', '_', self.name)
        self.option = option
        self.arity = arity
        self.default = default
        self.cast = cast
        self.preprocess = preprocess

    def __repr__(self):
        return f"ArgSpec({self.key}, names: {self.names}, option: {self.option}, arity: {self.arity})"

    def is_list(self):
        return self.arity in ("*", "+")

    def min_count(self):
        return 1 if self.arity in ("1", "+") else 0

    def max_count(self):
        return None if self.is_list() else 1

    def convert(self, value):
        if value is None:
            return None
        if self.cast:
            try:
                value = CASTS[self.cast](value)
            except ValueError:
                raise InputError(f"Invalid value '{value}' for {self.name}, expected {self.cast}")
        if self.preprocess:
            value = self.preprocess(value)
        return value

    def finish(self, values):
        if not values and self.default is not None:
            values = self.default if self.is_list() else [self.default]
        if len(values) < self.min_count():
            raise InputError(f"Missing mandatory argument {self.name}")
        values = [self.convert(v) for v in values]
        if self.is_list():
            return values
        return values[-1] if values else None


def _command(func):
    if hasattr(func, "arg_specs"):
        return func

    def wrapper(self, line):
        kwargs = parse_line(wrapper.arg_specs, line)
        logging.debug(f"Calling {func.__name__} with arguments {kwargs}")
        return func(self, **kwargs)

    wrapper.__name__ = func.__name__
    wrapper.__doc__ = func.__doc__
    wrapper.arg_specs = []
    return wrapper

def _declare(func, spec):
    wrapper = _command(func)
    # decorators run bottom-up; keep the specs in source order
    wrapper.arg_specs.insert(0, spec)
    return wrapper

def _split_option(token):
    """("name", value or None, bundled) for a token starting with a dash."""
    if token.startswith("--"):
        name, sep, value = token[2:].partition("=")
        return (name, value if sep else None, False)
    return (token[1], token[2:] or None, True)

def _read_tokens(specs, tokens):
    options = {s.key: [] for s in specs if s.option}
    lookup = {name: s for s in specs if s.option for name in s.names}
    positionals = []
    options_done = False
    while tokens:
        token = tokens.pop(0)
        if options_done or not token.startswith("-"):
            positionals.append(token)
            continue
        if token in ("-", "--"):
            options_done = True
            continue

        name, value, bundled = _split_option(token)
        spec = lookup.get(name)
        if spec is None:
            raise InputError(f"Invalid option {name}")
        if spec.arity == "0":
            options[spec.key] = True
            if value is not None:
                if not bundled:
                    raise InputError(f"Option {name} doesn't take a value")
                # -vt4 is -v -t4
                tokens.insert(0, "-" + value)
            continue
        if value is None:
            if not tokens:
                raise InputError(f"Option {name} requires a value")
            value = tokens.pop(0)
        options[spec.key].append(value)
    return (options, positionals)

def _assign_positionals(specs, positionals):
    """Earlier arguments take as many values as they can while leaving
    enough for the minimum counts of the later ones."""
    assigned = {}
    remaining = len(positionals)
    for (ix, spec) in enumerate(specs):
        reserved = sum(s.min_count() for s in specs[ix + 1:])
        take = max(0, remaining - reserved)
        if spec.max_count() is not None:
            take = min(take, spec.max_count())
        start = len(positionals) - remaining
        assigned[spec.key] = positionals[start:start + take]
        remaining -= take
    if remaining:
        raise InputError("Too many arguments")
    return assigned

def parse_line(specs, line):
    try:
        tokens = shlex.split(line)
    except ValueError as ex:
        raise InputError(f"Unable to parse command line: {ex}")

    options, positionals = _read_tokens(specs, tokens)
    values = _assign_positionals([s for s in specs if not s.option], positionals)

    kwargs = {}
    for spec in specs:
        if spec.arity == "0":
            kwargs[spec.key] = options[spec.key] is True or spec.default
        elif spec.option:
            kwargs[spec.key] = spec.finish(options[spec.key])
        else:
            kwargs[spec.key] = spec.finish(values[spec.key])
    return kwargs


def option(*names, arity="?", **kwargs):
    def decorator(f):
        return _declare(f, ArgSpec(names, option=True, arity=arity, **kwargs))
    return decorator

def flag(*names, default=False):
    def decorator(f):
        return _declare(f, ArgSpec(names, option=True, arity="0", default=default))
    return decorator

def arg(name, arity="1", **kwargs):
    def decorator(f):
        return _declare(f, ArgSpec([name], arity=arity, **kwargs))
    return decorator

def path_option(*names, **kwargs):
    return option(*names, preprocess=os.path.expanduser, **kwargs)

def argless():
    return _command

def chain(*decorators):
    def decorator(f):
        for d in decorators:
            f = d(f)
        return f
    return decorator
