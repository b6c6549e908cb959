"""Exact best returns with and without history for small task instances."""
from naht_mat.envs import SignalGame, TypedGoalGridworld, oracle_memoryless_return, oracle_optimal_return


def main():
    print("signal game, M=3, 5 families")
    for horizon in (1, 2, 3, 4, 5):
        env = SignalGame(3, 5, horizon)
        print(f"  T={horizon}: history {oracle_optimal_return(env):.4f}  memoryless {oracle_memoryless_return(env):.4f}")
    print("gridworld 3x3, 2 agents, 2 goals, T=6, one family")
    env = TypedGoalGridworld(size=3, num_agents=2, num_goals=2, horizon=6)
    for seed in range(3):
        opt = oracle_optimal_return(env, [0], seed=seed)
        mem = oracle_memoryless_return(env, [0], seed=seed)
        print(f"  layout seed {seed}: history {opt:.4f}  memoryless {mem:.4f}")


if __name__ == "__main__":
    main()
