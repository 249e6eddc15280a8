"""Meta-learned reinforcement learning with recurrent policies, plus classical bandit and MDP baselines."""

__version__ = "0.1.0"
