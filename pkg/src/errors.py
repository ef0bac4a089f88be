#!/usr/bin/env python3
# -*- coding: UTF-8 -*-

"""Exception hierarchy for lightprune.

Library code raises these; only cli.main() turns them into exit codes.
UserError subclasses exit with 1 and everything else exits with 2.
"""


class LightPruneError(Exception):
    """Base class of every error raised on purpose by lightprune."""
    exit_code = 2


class UserError(LightPruneError):
    """Bad input, bad config or bad files: the user can fix it."""
    exit_code = 1


class InternalError(LightPruneError):
    """A broken contract inside the library."""
    exit_code = 2


class ParseError(UserError):
    def __init__(self, path, lineno, line, reason):
        self.path = path
        self.lineno = lineno
        super(ParseError, self).__init__(
            "{}:{}: cannot parse interaction line {!r} ({})".format(path, lineno, line, reason)
        )


class DatasetEmptyError(UserError):
    pass


class EmptySplitError(UserError):
    pass


class ConfigError(UserError):
    pass


class AugmentationBudgetError(UserError):
    def __init__(self, estimated, budget):
        self.estimated = estimated
        self.budget = budget
        super(AugmentationBudgetError, self).__init__(
            "augmentation budget exceeded: an estimated {} edges would be "
            "materialized (budget {}); set augment.cap or raise augment.budget".format(estimated, budget)
        )


class IntegrityError(UserError):
    def __init__(self, path, reason):
        self.path = path
        super(IntegrityError, self).__init__("integrity check failed for '{}': {}".format(path, reason))


class StaleArtifactError(UserError):
    pass


class MissingArtifactError(UserError):
    pass


class LockError(UserError):
    pass


class ContractError(InternalError):
    pass


class NonFiniteError(InternalError):
    def __init__(self, component, value=None):
        self.component = component
        super(NonFiniteError, self).__init__(
            "non-finite value in '{}' ({}); training aborted".format(component, value)
        )


class MissingTeacherWeightError(InternalError):
    pass
