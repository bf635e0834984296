from protoquant import *

spec = DatasetSpec(num_classes=5, dim=16, n_per_class=60, intra_spread=0.3, inter_separation=0.8, seed=0)
data = generate_dataset(spec)
train_data, test_data = few_shot_split(data, shots=8, seed=0)

config = TrainConfig(epochs=30, m=8, seed=0)
state = train(config, train_data)
report, out = evaluate(state.model, test_data)
print('accuracy {:.4f}  paa {}'.format(report.accuracy, report.paa))
print(prototype_geometry(out.prototypes))

result = temperature_sweep(config, data, taus=[0.5, 1.0, 3.0], seeds=[0, 1])
for row in result.summary:
    print(row['variant'], row['accuracy_mean'], row['entropy_mean'])

print(run_gradient_suite(configurations=3))
