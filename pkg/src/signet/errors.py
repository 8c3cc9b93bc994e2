"""Exception hierarchy shared by every stage.

The CLI maps these onto exit codes, so each class carries ``exit_code``.
"""


class SignetError(Exception):
    exit_code = 2


class InvalidInput(SignetError, ValueError):
    pass


class ConfigError(SignetError, ValueError):
    exit_code = 1

    def __init__(self, field, message=None):
        self.field = field
        super().__init__(field if message is None else f"{field}: {message}")


class SourceError(SignetError, OSError):
    pass


class DecodeError(SignetError):
    def __init__(self, doc_id, message=""):
        self.doc_id = doc_id
        super().__init__(f"{doc_id}: {message}" if message else doc_id)


class DataError(SignetError, ValueError):
    pass


class DegenerateEmbedding(SignetError, ValueError):
    pass


class StoreError(SignetError, OSError):
    pass


class FormatError(StoreError):
    pass


class CorruptIndexError(StoreError):
    pass


class StartupError(SignetError):
    exit_code = 3
