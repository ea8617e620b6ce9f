"""Exception hierarchy shared by the analysis pipeline."""


class WcecError(Exception):
    """Base class for all analyzer errors."""


class LoadError(WcecError):
    pass


class DecodeError(WcecError):
    def __init__(self, addr, raw, message="undefined encoding"):
        self.addr = addr
        self.raw = tuple(raw)
        halves = " ".join(f"{h:04x}" for h in self.raw)
        super().__init__(f"{message} at {addr:#010x}: {halves}")


class AddressError(WcecError):
    def __init__(self, addr, message="address not in an executable region"):
        self.addr = addr
        super().__init__(f"{message}: {addr:#010x}")


class AnnotationError(WcecError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = f"{line}:{column}: " if line is not None else ""
        super().__init__(where + message)


class CfgError(WcecError):
    pass


class UnboundedLoop(WcecError):
    def __init__(self, header):
        self.header = header
        super().__init__(f"no bound for loop at {header:#010x}")


class ModelError(WcecError):
    pass


class SolverError(WcecError):
    pass


class SolverBudgetExceeded(SolverError):
    """Raised when branch-and-bound runs out of time.

    ``relaxation_bound`` is the best LP relaxation value seen, an upper bound
    on the integer optimum but not a solution.
    """

    def __init__(self, relaxation_bound):
        self.relaxation_bound = relaxation_bound
        super().__init__(f"solver time budget exceeded; LP relaxation bound {relaxation_bound}")


class ConfigError(WcecError):
    pass


class SimulationFault(WcecError):
    def __init__(self, pc, cause):
        self.pc = pc
        self.cause = cause
        super().__init__(f"fault at {pc:#010x}: {cause}")
