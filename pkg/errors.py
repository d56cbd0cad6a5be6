"""
Hierarquia de exceções dos sketches de cardinalidade.

Cada erro previsto pelos módulos tem uma classe aqui; a CLI mapeia a
classe em um código de saída.
"""


class SketchError(Exception):
    """Raiz de todos os erros do projeto."""


class DomainError(SketchError, ValueError):
    """Parâmetro fora do seu domínio (u, q, p, alpha, epsilon, nível, m...)."""


class StreamIndexError(SketchError, IndexError):
    """Índice de fluxo de hash j >= m."""


class UnsupportedDeletionError(SketchError):
    """Remoção (d <= 0) enviada a um sketch que só aceita inserções."""


class IncompatibleSketchError(SketchError):
    """Tentativa de combinar sketches com configurações diferentes."""


class EmptySketchError(SketchError):
    """Estimação pedida com algum slot ainda vazio."""


class DegenerateSketchError(SketchError):
    """Estatística suficiente nula: todos os slots no supremo."""


class InsufficientDataError(SketchError):
    """Menos de k valores em algum fluxo (implica c < k)."""


class SaturatedSketchError(SketchError):
    """Todos os bits do sketch de Bernoulli estão ligados.

    Só existe limite inferior de confiança nesse caso; ele vai em `lower_bound`.
    """

    def __init__(self, message, lower_bound):
        super().__init__(message)
        self.lower_bound = lower_bound


class InvalidStateError(SketchError):
    """Acumulador de projeção com sinal <= 0 no momento da estimação."""


class NumericError(SketchError, ArithmeticError):
    """Iteração numérica sem convergência; guarda o valor inicial usado."""

    def __init__(self, message, initial_estimate=None):
        super().__init__(message)
        self.initial_estimate = initial_estimate


class IntegrityError(SketchError):
    """Quantidade acumulada negativa no oráculo de contagem exata."""


class FormatError(SketchError, ValueError):
    """Linha de fluxo, envelope JSON ou frame binário malformado."""


class AccuracyWarning(UserWarning):
    """Configuração válida, mas com precisão duvidosa."""
