mod common;

use common::*;

#[test]
fn every_module_matches_central_differences() {
    let (cfg, abl, params) = toy_model(8);
    let toy = Toy::new(2, 32, cfg.light_code_channels(&abl), 3);
    for (k, (module, probe)) in module_probes().into_iter().enumerate() {
        let r = check_module(&params, cfg, &toy, module, probe, 30, 1e-3, 100 + k as u64);
        println!("{module}: {}/{} within 1e-3, worst {:.2e}", r.passed, r.checked, r.worst);
        assert!(r.pass_rate() >= 0.95, "{module}: only {}/{} gradients agree", r.passed, r.checked);
    }
}
