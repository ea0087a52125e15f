"""Exception hierarchy shared by the substrate, services and CLI.

Each error carries a stable ``code`` so the CLI and the search log can
report failures the same way regardless of where they were raised.
"""
from typing import Any, Dict, Optional


class AutoODError(Exception):
    code = "AUTOOD_ERROR"

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_dict(self) -> Dict[str, Any]:
        return {"code": self.code, "message": self.message, **self.details}


class ContractError(AutoODError, ValueError):
    """A precondition of an operation was violated by its caller."""

    code = "CONTRACT_ERROR"


class ShapeError(ContractError):
    code = "SHAPE_ERROR"


class GraphConstructionError(ContractError):
    code = "GRAPH_CONSTRUCTION_ERROR"

    def __init__(self, message: str, node: Optional[str] = None, **details: Any):
        super().__init__(f"node '{node}': {message}" if node else message, node=node, **details)
        self.node = node


class NumericError(AutoODError, ArithmeticError):
    code = "NUMERIC_ERROR"

    def __init__(self, message: str, where: Optional[str] = None, **details: Any):
        super().__init__(f"{where}: {message}" if where else message, where=where, **details)
        self.where = where


class DecodeError(ContractError):
    code = "DECODE_ERROR"

    def __init__(self, message: str, slot: int, **details: Any):
        super().__init__(f"slot {slot}: {message}", slot=slot, **details)
        self.slot = slot


class EncodeError(ContractError):
    code = "ENCODE_ERROR"


class BuildError(AutoODError):
    code = "BUILD_ERROR"

    def __init__(self, message: str, layer: Optional[int] = None, **details: Any):
        super().__init__(f"layer {layer}: {message}" if layer is not None else message, layer=layer, **details)
        self.layer = layer


class FormatError(AutoODError):
    code = "FORMAT_ERROR"

    def __init__(self, message: str, offset: int, **details: Any):
        super().__init__(f"{message} (byte offset {offset})", offset=offset, **details)
        self.offset = offset


class ConfigError(ContractError):
    code = "CONFIG_ERROR"
