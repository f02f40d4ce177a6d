"""
Masked advantage estimation over mixed-origin steps
===================================================

Trajectories interleave policy-written tokens with environment-inserted
tool output.  The environment positions carry no decision, so their
advantages are forced to zero and the gradient objective never sees them,
whatever garbage the value model predicts there.
"""

import random

from ztir.advantage import StepRecord, compute_gae, compute_returns, ppo_clip_terms


def policy(reward, value, lp=-0.7):
    return StepRecord(reward=reward, value=value, logp_new=lp, logp_old=lp,
                      logp_ref=lp, is_env=False)


def env(reward, value):
    return StepRecord(reward=reward, value=value, logp_new=0.0, logp_old=0.0,
                      logp_ref=0.0, is_env=True)


# A five-step episode: think, code, observe tool output, think, answer.
# Only the final step is rewarded (outcome reward).
steps = [
    policy(0.0, 0.30),
    policy(0.0, 0.45),
    env(0.0, 0.00),
    policy(0.0, 0.70),
    policy(1.0, 0.85),
]

out = compute_gae(steps, gamma=1.0, lam=1.0)
returns = compute_returns(steps, gamma=1.0)
print("pos  origin  reward  value  return  advantage")
for i, (step, ret, adv) in enumerate(zip(steps, returns, out.advantages)):
    origin = "env" if step.is_env else "policy"
    print(f"{i:3d}  {origin:6s}  {step.reward:6.2f} {step.value:6.2f} "
          f"{ret:7.2f} {adv:10.4f}")
print()

# Masking invariance: scribble random values over the env position and
# recompute.  Nothing the optimizer consumes moves, bit for bit.
rng = random.Random(0)
scribbled = [
    env(s.reward, rng.uniform(-100, 100)) if s.is_env else s for s in steps
]
out2 = compute_gae(scribbled, gamma=1.0, lam=1.0)
same_adv = all(
    a == b for a, b, s in zip(out.advantages, out2.advantages, steps)
    if not s.is_env
)
summary1 = ppo_clip_terms(steps, out.advantages, 0.2)
summary2 = ppo_clip_terms(scribbled, out2.advantages, 0.2)
print(f"non-env advantages identical after scribbling : {same_adv}")
print(f"surrogate objective identical                 : {summary1 == summary2}")
print(f"objective mean over {summary1.token_count} policy tokens        : "
      f"{summary1.mean:.6f}")
