class InvalidGrid(ValueError):
    pass


class SampleError(ValueError):
    def __init__(self, index, value):
        super().__init__(f"non-finite sample {value!r} at node {index}")
        self.index = index
        self.value = value


class SingularOperator(ArithmeticError):
    """Raised when a linear system is (numerically) singular or indefinite."""


class MaxIterExceeded(RuntimeError):
    pass


class InfeasibleObstacles(ValueError):
    pass


class TooLarge(ValueError):
    pass


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
