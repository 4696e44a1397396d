"""Walkthrough: per-round communication costs across aggregation methods.

The analytic model prices factor slices at r*(d+k) floats; shipping the raw
concatenation instead grows linearly with the number of clients, which is
what the QR compression avoids.
"""

from fedqr import FederationConfig, RoundContext, account_communication

d, k, rank = 64, 32, 4

print(f"weight {d}x{k}, homogeneous rank {rank}, stationary rounds\n")
print("clients   method        down (KB)    up (KB)")
for n_clients in (4, 16, 64):
    ranks = (rank,) * n_clients
    ctx = RoundContext(sampled_ranks=ranks, d=d, k=k, first_round=False)
    for method in ("ilora", "ilora_s", "fedit_avg", "full_stack"):
        config = FederationConfig(
            n_clients=n_clients,
            client_ranks=ranks,
            server_rank=rank,
            method=method,
            rounds=1,
        )
        down, up = account_communication(config, ctx)
        print(f"{n_clients:7d}   {method:<12} {down / 1024:10.1f} {up / 1024:10.1f}")
    print()

print("downlink ratio full_stack / ilora at equal ranks equals the client count:")
for n_clients in (4, 16, 64):
    ranks = (rank,) * n_clients
    ctx = RoundContext(sampled_ranks=ranks, d=d, k=k, first_round=False)
    stack = FederationConfig(
        n_clients=n_clients, client_ranks=ranks, server_rank=rank,
        method="full_stack", rounds=1,
    )
    sliced = FederationConfig(
        n_clients=n_clients, client_ranks=ranks, server_rank=rank,
        method="ilora", rounds=1,
    )
    ratio = account_communication(stack, ctx)[0] / account_communication(sliced, ctx)[0]
    print(f"  S={n_clients:3d}: ratio {ratio:.1f}")
