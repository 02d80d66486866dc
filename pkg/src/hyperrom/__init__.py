"""Non-intrusive hyperreduction of nonlinear static structures with TPWL and PANN surrogates."""

__version__ = "0.1.0"
