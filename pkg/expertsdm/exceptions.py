
class InputError(Exception):
    exit_code = 2

class NumericalError(Exception):
    exit_code = 3

class NotPositiveDefinite(NumericalError):
    def __init__(self, message, minor=None):
        super().__init__(message)
        self.minor = minor

class ConvergenceError(NumericalError):
    def __init__(self, message, grad_norm=None, iterations=None):
        super().__init__(message)
        self.grad_norm = grad_norm
        self.iterations = iterations

class NonFiniteError(NumericalError):
    def __init__(self, message, block=None, row=None):
        super().__init__(message)
        self.block = block
        self.row = row
