class RaduError(Exception):
    """Базовая ошибка пакета."""


class ContractError(RaduError, ValueError):
    """Нарушено предусловие операции (формы, каналы, диапазоны)."""


class GradientError(RaduError, ArithmeticError):
    """Нечисловое значение в прямом проходе или в градиенте."""


class FormatError(RaduError):
    def __init__(self, path, offset: int, message: str):
        self.path = path
        self.offset = offset
        super().__init__(f"{path}: смещение {offset}: {message}")
