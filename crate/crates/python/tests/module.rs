use pyo3::prelude::*;
use pyo3::types::PyDict;

#[test]
fn module_runs_a_small_pipeline() {
    Python::initialize();
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(neft::neft)(py);
        let locals = PyDict::new(py);
        locals.set_item("neft", module).unwrap();
        py.run(
            c"
cfg = neft.ModelConfig(8, 4, 6, 2, 2, seed=3)
model = neft.Model.init(cfg)
data = neft.Dataset.synthetic('blobs', cfg, 32, 1)
ft = neft.train(model, data, seed=1, max_steps=20)
scores = neft.similarity(model, ft)
mask = neft.select(model, ft, 0.25)
tuned = neft.train(model, data, seed=1, max_steps=20, mask=mask)
frozen = [n for n in cfg.neurons() if not mask.contains(*n)]
ok = len(scores) == cfg.neuron_count and len(mask) == 5 and all(
    tuned.neuron_row(*n) == model.neuron_row(*n) for n in frozen)
try:
    neft.ModelConfig(8, 4, 6, 2, 2, activation='tanh')
    ok = False
except ValueError:
    pass
",
            Some(&locals),
            None,
        )
        .unwrap();
        assert!(locals.get_item("ok").unwrap().unwrap().extract::<bool>().unwrap());
    });
}
