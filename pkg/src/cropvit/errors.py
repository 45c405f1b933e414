"""Shared error types for configuration and contract violations."""


class ConfigError(Exception):
    """A configuration value violates a structural requirement."""


class ContractError(Exception):
    """A runtime contract was broken (e.g. gradient on a frozen backbone)."""


class InputError(Exception):
    """Input data cannot be processed (wrong size, malformed record)."""
