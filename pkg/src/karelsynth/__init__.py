"""Neural program synthesis for a Karel gridworld DSL.

Pipeline pieces: DSL front end (lang), gridworld interpreter (vm),
incremental syntax checker (oracle), dataset generation (datagen), a
numpy autodiff core (nn), the sequence synthesizer (model), beam search
and sampling (search), training losses and rewards (objectives), metrics
(evaluation), training loops (train), and a command-line front end (cli).
"""

__version__ = "0.1.0"
