"""Exceptions and Error Handling."""

import abc
from typing import Any


class PanoDeformErrorMixin(abc.ABC, BaseException):
    """Base class for panodeform errors and exceptions.

    Example:

        >>> class MyError(PanoDeformErrorMixin, NameError):
                msg_template = "Value ``{value}`` could not be found"
        >>> raise MyError(value="can't touch this")
        (...)
        MyError: Value `can't touch this` could not be found

    ``exit_code`` es el código con el que termina la CLI si el error
    escapa de un comando.

    """

    exit_code = 1

    @property
    @abc.abstractmethod
    def msg_template(self) -> str:
        """A template to print when the exception is raised.

        Example:
            "Value ``{value}`` could not be found"

        """

    def __init__(self, **ctx: Any) -> None:
        self.ctx = ctx
        super().__init__()

    def __str__(self) -> str:
        txt = self.msg_template
        for name, value in self.ctx.items():
            txt = txt.replace("{" + name + "}", str(value))
        txt = txt.replace("`{", "").replace("}`", "")

        return txt


class DimensionError(PanoDeformErrorMixin, ValueError):
    """Levantar cuando las formas de dos tensores no son compatibles."""

    msg_template = "Dimensiones incompatibles en `{op}`: {detail}"


class NonFiniteError(PanoDeformErrorMixin, FloatingPointError):
    """Levantar cuando una operación produce NaN o Inf."""

    msg_template = "La operación `{op}` produjo valores no finitos."
    exit_code = 4


class InvalidSize(PanoDeformErrorMixin, ValueError):
    """Levantar cuando un tamaño pedido no es positivo."""

    msg_template = "Tamaño inválido `{size}` en `{op}`."


class AspectRatioError(PanoDeformErrorMixin, ValueError):
    """Levantar cuando un panorama no cumple W == 2H."""

    msg_template = "El panorama debe cumplir W == 2H: {height}x{width}."
    exit_code = 3


class InvalidFov(PanoDeformErrorMixin, ValueError):
    """Levantar cuando el campo de visión no está en (0, 180)."""

    msg_template = "FoV `{fov}` fuera de (0, 180) grados."


class DivisibilityError(PanoDeformErrorMixin, ValueError):
    """Levantar cuando un mapa no es divisible por el stride pedido."""

    msg_template = "El tamaño {height}x{width} no es divisible por `{stride}`."


class StageMismatch(PanoDeformErrorMixin, ValueError):
    """Levantar cuando una pirámide no calza con la configuración."""

    msg_template = "La pirámide no calza con el modelo: {detail}"


class MissingBank(PanoDeformErrorMixin, RuntimeError):
    """Levantar cuando el modo mpa corre sin banco de prototipos."""

    msg_template = "El modo `{mode}` requiere un banco inicializado."
    exit_code = 2


class DatasetIOError(PanoDeformErrorMixin, OSError):
    """Levantar cuando un archivo del dataset no se puede leer o escribir."""

    msg_template = "Error de I/O en `{path}`: {detail}"
    exit_code = 3


class MissingSplit(PanoDeformErrorMixin, KeyError):
    """Levantar cuando el manifest no contiene el split pedido."""

    msg_template = "El manifest no contiene el split `{split}`."
    exit_code = 3


class CorruptTensorFile(PanoDeformErrorMixin, ValueError):
    """Levantar cuando un archivo no respeta el formato PDT1."""

    msg_template = "Archivo de tensor inválido `{path}`: {detail}"
    exit_code = 3


class ConfigError(PanoDeformErrorMixin, ValueError):
    """Levantar cuando la configuración de un experimento es inválida."""

    msg_template = "Configuración inválida: {detail}"
    exit_code = 2


class InvalidOverride(PanoDeformErrorMixin, ValueError):
    """Levantar cuando un ``--set`` no tiene la forma ``a.b=valor``."""

    msg_template = "Override inválido `{override}`: {detail}"
    exit_code = 2


class OutputDirNotEmpty(PanoDeformErrorMixin, FileExistsError):
    """Levantar cuando se escribiría sobre un directorio con contenido."""

    msg_template = "El directorio `{path}` no está vacío (usar --force)."
    exit_code = 2


class GradcheckFailed(PanoDeformErrorMixin, ArithmeticError):
    """Levantar cuando un gradiente no calza con diferencias finitas."""

    msg_template = "Gradcheck falló para: {ops}"
    exit_code = 4


class StageFailed(PanoDeformErrorMixin, RuntimeError):
    """Envuelve el error de una etapa del pipeline con su nombre."""

    msg_template = "La etapa `{stage}` falló: {cause}"

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(stage=stage, cause=cause)
        self.exit_code = getattr(cause, "exit_code", 1)
