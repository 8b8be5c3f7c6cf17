class PoemseqError(Exception):
    pass


class ConfigurationError(PoemseqError):
    pass


class ProviderError(PoemseqError):
    """A provider (tagger, LLM, embedder, image backend) call failed."""

    def __init__(self, message: str, *, retryable: bool = True, line_index: int | None = None, status: int | None = None):
        super().__init__(message)
        self.retryable = retryable
        self.line_index = line_index
        self.status = status


class ImageValidationError(PoemseqError):
    pass
