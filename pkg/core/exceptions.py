"""Error hierarchy shared by every part of the core app."""


class CNLError(Exception):
    """Base class for cooperative network learning failures"""


class ConfigError(CNLError, ValueError):
    """Malformed configuration, dataset files or arguments"""


class GraphError(CNLError, ValueError):
    """Invalid graph, partition or split request"""


class ShapeError(CNLError, ValueError):
    """Incompatible matrix or tensor shapes"""


class TrainingDivergedError(CNLError):
    """Loss or update became non-finite during training"""

    def __init__(self, message, epoch=None, history=None):
        super().__init__(message)
        self.epoch = epoch
        self.history = list(history or [])


class SingularSystemError(CNLError):
    """Least-squares system could not be solved even with ridge"""


class CryptoError(CNLError):
    """Key, ciphertext or encoding failure"""


class EncodingOverflowError(CryptoError, ValueError):
    """Value or addend count exceeds fixed-point headroom"""


class SealError(CryptoError):
    """Sealed control payload failed to authenticate or open"""


class ProtocolError(CNLError):
    """Node service or wire failure"""


class PeerUnreachableError(ProtocolError):
    """A neighbor could not be contacted after retries"""


class UnknownTaskError(ProtocolError):
    """A message referred to a task the node never registered"""


class RoundTimeoutError(ProtocolError):
    """An exchange round did not finish before its deadline"""
