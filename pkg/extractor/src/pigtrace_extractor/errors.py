"""Error types raised by the extractor.

Everything derives from ExtractorError so callers can catch extraction
failures without also swallowing engine or framework exceptions.
"""


class ExtractorError(Exception):
    """Base class for every error raised by this package."""


class SpanMappingError(ExtractorError):
    """A character span does not map to a usable token span.

    The message carries both character and token diagnostics so the
    offending prompt line can be fixed without re-running under a
    debugger.
    """

    def __init__(self, message: str, *, span_chars: tuple[int, int] | None = None):
        self.span_chars = span_chars
        super().__init__(message)


class ExtractionError(ExtractorError):
    """A checkpoint could not be loaded, run, or its output written."""


class UsageError(ExtractorError):
    """Bad command line usage or a malformed prompt file."""
