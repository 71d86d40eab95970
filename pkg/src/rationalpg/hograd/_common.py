"""Op codes, errors and the gradient result shared by both tape backends."""

OP_LEAF = 0
OP_CONST = 1
OP_ADD = 2
OP_SUB = 3
OP_MUL = 4
OP_DIV = 5
OP_NEG = 6
OP_ADDC = 7
OP_MULC = 8
OP_EXP = 9
OP_LOG = 10
OP_SQRT = 11
OP_POWC = 12
OP_STOP = 13

OP_NAMES = ("leaf", "const", "add", "sub", "mul", "div", "neg", "addc",
            "mulc", "exp", "log", "sqrt", "powc", "stop_gradient")


class ContractViolation(ValueError):
    """A precondition of a public operation was not met."""


class StaleDependencyError(ContractViolation):
    """A node from a closed tape was used."""


class Gradients(list):
    """List of gradients plus the positions of disconnected leaves.

    A disconnected leaf has no path to the root (or is not on the tape);
    its entry is zero and its position is listed in ``disconnected``.
    """

    def __init__(self, values, disconnected=()):
        super().__init__(values)
        self.disconnected = tuple(disconnected)

    @property
    def any_disconnected(self):
        return bool(self.disconnected)
