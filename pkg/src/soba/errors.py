"""Exception types shared across the toolkit."""


class DataError(ValueError):
    """Malformed input data or a violated operation precondition.

    Raised for anything a caller can fix by supplying different data:
    malformed RLE, dimension mismatches, dangling references, degenerate
    geometry. The CLI maps this to exit code 2; everything else that
    escapes is treated as an internal failure (exit code 3).
    """
