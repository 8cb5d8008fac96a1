"""Energy-efficient nonstationary TDMA spectrum sharing.

Solvers and simulators for minimum-energy spectrum sharing among users
with rate floors: instantaneous-rate selection by distributed bisection,
longest-distance-first scheduling under binary distress feedback,
stationary/round-robin/punish-forgive baselines, dynamic user entry and
exit, and a seeded Monte-Carlo comparison harness.
"""

__version__ = "0.1.0"
