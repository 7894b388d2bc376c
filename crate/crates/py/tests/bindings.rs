use std::ffi::CString;

use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &str) {
    Python::attach(|py| {
        let module = pyo3::wrap_pymodule!(locoop_py::locoop_py)(py);
        let globals = PyDict::new(py);
        globals.set_item("lp", module).unwrap();
        let code = CString::new(code).unwrap();
        if let Err(e) = py.run(&code, Some(&globals), None) {
            e.print(py);
            panic!("python raised");
        }
    });
}

#[test]
fn metrics_and_gradcheck() {
    run(r#"
assert lp.auroc([1.0, 2.0], [0.0, 3.0]) == 0.5
m = lp.metrics([3.0, 4.0, 5.0], [1.0, 4.5])
assert m["n_id"] == 3 and m["n_ood"] == 2
assert lp.gradcheck(3) < 1e-4
try:
    lp.auroc([], [1.0])
except ValueError:
    pass
else:
    raise AssertionError("empty input accepted")
"#);
}

#[test]
fn train_and_evaluate_a_small_world() {
    run(r#"
w = lp.WorldConfig(m_classes=4, dim=12, grid_h=2, grid_w=3, n_ctx=3, shots=4,
                   pool_per_class=6, id_test_per_class=4, ood_test=10, seed=5)
b = lp.Benchmark(w)
r = b.train(lp.TrainConfig(epochs=3, k=1))
assert len(r.losses) == 3 and len(r.irrelevant_fraction) == 3
e = b.evaluate(r.context, "mcm")
assert e["score"] == "mcm" and e["n_ood"] == 10
assert b.train(lp.TrainConfig(epochs=3, k=1)).context == r.context
try:
    b.train(lp.TrainConfig(k=9))
except ValueError:
    pass
else:
    raise AssertionError("K above M accepted")
"#);
}

#[test]
fn missing_files_raise_os_errors() {
    run(r#"
try:
    lp.read_features("/nonexistent/x.lcfm")
except OSError:
    pass
else:
    raise AssertionError
"#);
}
