# %% [markdown]
# # A miniature ablation table
#
# The ``ccl ablate`` subcommand sweeps the on/off grid of the three
# collaboration terms over several seeds. Here we run the same sweep in
# process at toy scale and print the table.

# %%
from ccl.cli import ExperimentSpec, format_table, run_ablation

spec = ExperimentSpec.from_dict({
    "data": {"image_size": [32, 32], "sizes": {"source": 24, "target_train": 16, "target_eval": 10}},
    "train": {"iterations": 40, "batch_size": 2, "base_width": 4, "depth": 2, "disc_width": 4,
              "eval_every": 0, "weights": {"lambda_adv": 1e-3, "lambda_cl": 1.0,
                                                        "lambda_okd": 1.0, "lambda_wr": 1e-3}},
    "seeds": [0, 1],
    "grid": [[False, False, False], [True, False, False], [False, True, False], [True, True, True]],
    "individual": True,
})

# %%
result = run_ablation(spec, spec.dataset())
print(format_table(result))

# %% [markdown]
# Each cell is the mean over seeds of the final student mIoU on one target
# (x100), with the standard deviation after the plus-minus sign. The
# Individual row trains one expert per target with no student and no
# collaboration.
