"""
Desk-scale training dynamics: tool use emerges from outcome reward
==================================================================

A two-action policy (guess directly, or write code) trains against
arithmetic problems where guessing succeeds 30% of the time and code is
reliable.  Nothing tells the policy to use the tool; the reward landscape
does.  Accuracy and code usage climb together.
"""

from ztir.advantage import BaselineMode
from ztir.toy import ToyTrainConfig, summarize_run, train_toy

config = ToyTrainConfig(
    seed=7,
    updates=1200,
    p_guess=0.3,
    baseline=BaselineMode.GROUP_MEAN,
)
result = train_toy(config)

print("update  accuracy  code-rate  calls/sample  kept")
for row in result.history[:: len(result.history) // 12]:
    print(f"{row['step']:6d}  {row['reward_avg']:8.3f}  "
          f"{row['code_proportion']:9.3f}  {row['code_count_avg']:12.3f}  "
          f"{row['kept_group_fraction']:4.0f}")

summary = summarize_run(result.history)
print()
print(f"final accuracy        : {summary['final_accuracy']:.3f}")
print(f"final code proportion : {summary['final_code_proportion']:.3f}")
print(f"rank corr(acc, code)  : {summary['spearman_acc_code']:.3f} "
      f"over {summary['windows']} windows")
print(f"trained p(write code) : {result.policy.p_write_code():.3f}")
