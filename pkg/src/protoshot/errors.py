class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class SamplingError(ValueError):
    """The dataset cannot supply the requested episode or split."""


class SamplingTimeoutError(SamplingError):
    """A rejection sampler ran out of attempts."""


class DegenerateSupportError(ValueError):
    """Support embeddings do not determine a prototype (e.g. zero mean direction)."""
