//! Register tokens: cross-map interleaving, the register bank, and the
//! extractor/retriever pair that moves temporal context between frames.

mod bank;
mod interleave;

pub use bank::{BankEntry, BankSnapshotMeta, RegisterBank};
pub use interleave::{
    build_layout, deinterleave, interleave, interleave_grouped, segment_sizes, InsertMode,
    InterleaveLayout,
};

use rand::Rng;

use crate::error::{ensure, Result};
use crate::numerics::{BoundParams, ParamId, ParamStore, Real, Var};
use crate::ssm::{mamba_stack, MambaBlockParams};

/// The trainable register `r ∈ R^{k×2C}` shared by every frame.
#[derive(Clone, Debug)]
pub struct RegisterTemplate {
    pub r: ParamId,
    pub k: usize,
    /// Token width `2C`.
    pub width: usize,
}

impl RegisterTemplate {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        k: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let r = store.normal(name, &[k, width], 1.0, rng);
        Self { r, k, width }
    }
}

/// Runs the extractor on search tokens `x` ([T_x, 2C]) with the register
/// placed behind each of `k` image segments. Returns `(x̂_t, r_t)`.
///
/// Frame-local by construction: no bank is involved.
pub fn extract<'t, T: Real>(
    x: Var<'t, T>,
    reg: &RegisterTemplate,
    blocks: &[MambaBlockParams],
    p: &BoundParams<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let xs = x.shape();
    ensure!(
        xs.len() == 2 && xs[1] == reg.width,
        "search tokens must be [T_x, {}], got {xs:?}",
        reg.width
    );
    ensure!(
        xs[0] >= reg.k,
        "{} search tokens cannot host {} register segments",
        xs[0],
        reg.k
    );
    let (fused, layout) = interleave(x, p.get(reg.r), InsertMode::Behind)?;
    let fused = mamba_stack(fused, blocks, p)?;
    deinterleave(fused, &layout)
}

/// Number of bank entries a retrieval over `template_tokens` tokens uses.
pub fn retrieval_groups(count: usize, template_tokens: usize) -> usize {
    count.min(template_tokens)
}

/// Runs the retriever on template tokens `z` ([T_z, 2C]) with bank entries
/// (newest first, each [k, 2C]) inserted as contiguous groups before each
/// template segment. At most `T_z` entries are used; older ones are skipped.
pub fn retrieve<'t, T: Real>(
    z: Var<'t, T>,
    entries: &[Var<'t, T>],
    blocks: &[MambaBlockParams],
    p: &BoundParams<'t, T>,
) -> Result<Var<'t, T>> {
    ensure!(
        !entries.is_empty(),
        "retrieve needs a non-empty register bank (seed it at init)"
    );
    let zs = z.shape();
    ensure!(zs.len() == 2, "template tokens must be [T_z, dim], got {zs:?}");
    let m = retrieval_groups(entries.len(), zs[0]);
    let shape = entries[0].shape();
    ensure!(
        shape.len() == 2 && shape[1] == zs[1],
        "bank entries {shape:?} do not match template width {}",
        zs[1]
    );
    ensure!(
        entries[..m].iter().all(|e| e.shape() == shape),
        "bank entries have inconsistent shapes"
    );
    let extra = z.tape().concat(&entries[..m]);
    let (fused, layout) = interleave_grouped(z, extra, m, InsertMode::Before)?;
    let fused = mamba_stack(fused, blocks, p)?;
    Ok(deinterleave(fused, &layout)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use crate::ssm::BlockConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        store: ParamStore<f64>,
        reg: RegisterTemplate,
        ext: Vec<MambaBlockParams>,
        ret: Vec<MambaBlockParams>,
    }

    fn fixture(width: usize, k: usize) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let reg = RegisterTemplate::new(&mut store, "reg", k, width, &mut rng);
        let cfg = BlockConfig::default();
        let ext = (0..2)
            .map(|i| MambaBlockParams::new(&mut store, &format!("ext{i}"), width, cfg, &mut rng))
            .collect();
        let ret = (0..2)
            .map(|i| MambaBlockParams::new(&mut store, &format!("ret{i}"), width, cfg, &mut rng))
            .collect();
        Fixture {
            store,
            reg,
            ext,
            ret,
        }
    }

    fn tokens(tape: &Tape<f64>, t: usize, w: usize, phase: f64) -> Var<'_, f64> {
        tape.constant(
            &[t, w],
            (0..t * w).map(|i| (i as f64 * 0.37 + phase).sin()).collect(),
        )
    }

    #[test]
    fn extract_shapes() {
        let f = fixture(8, 8);
        let tape = Tape::new();
        let p = f.store.bind(&tape);
        let (xh, r) = extract(tokens(&tape, 144, 8, 0.0), &f.reg, &f.ext, &p).unwrap();
        assert_eq!(xh.shape(), vec![144, 8]);
        assert_eq!(r.shape(), vec![8, 8]);
    }

    #[test]
    fn pass_through_extract_and_retrieve_are_identity() {
        let mut f = fixture(4, 2);
        for b in f.ext.iter().chain(&f.ret) {
            b.make_pass_through(&mut f.store);
        }
        let tape = Tape::new();
        let p = f.store.bind(&tape);
        let x = tokens(&tape, 10, 4, 0.0);
        let (xh, r) = extract(x, &f.reg, &f.ext, &p).unwrap();
        assert_eq!(xh.value(), x.value());
        assert_eq!(r.value(), f.store.get(f.reg.r).data());
        let z = tokens(&tape, 9, 4, 1.0);
        assert_eq!(retrieve(z, &[r, r], &f.ret, &p).unwrap().value(), z.value());
    }

    #[test]
    fn different_search_maps_give_different_registers() {
        let f = fixture(4, 2);
        let tape = Tape::new();
        let p = f.store.bind(&tape);
        let (_, r1) = extract(tokens(&tape, 12, 4, 0.0), &f.reg, &f.ext, &p).unwrap();
        let (_, r2) = extract(tokens(&tape, 12, 4, 0.5), &f.reg, &f.ext, &p).unwrap();
        let d: f64 = r1.value().iter().zip(r2.value()).map(|(a, b)| (a - b).abs()).sum();
        assert!(d > 0.0);
    }

    #[test]
    fn retrieve_shape_and_sensitivity() {
        let f = fixture(4, 2);
        let tape = Tape::new();
        let p = f.store.bind(&tape);
        let z = tokens(&tape, 9, 4, 0.2);
        let entries: Vec<_> = (0..12).map(|i| tokens(&tape, 2, 4, i as f64)).collect();
        for count in [1, 5, 12] {
            let out = retrieve(z, &entries[..count], &f.ret, &p).unwrap();
            assert_eq!(out.shape(), vec![9, 4]);
        }
        let one = retrieve(z, &entries[..1], &f.ret, &p).unwrap().value();
        let two = retrieve(z, &entries[..2], &f.ret, &p).unwrap().value();
        assert_ne!(one, two);
        assert!(retrieve(z, &[], &f.ret, &p).is_err());
    }

    #[test]
    fn entries_beyond_template_length_are_skipped() {
        let f = fixture(4, 2);
        let tape = Tape::new();
        let p = f.store.bind(&tape);
        let z = tokens(&tape, 3, 4, 0.2);
        let entries: Vec<_> = (0..5).map(|i| tokens(&tape, 2, 4, i as f64)).collect();
        let capped = retrieve(z, &entries[..3], &f.ret, &p).unwrap().value();
        let all = retrieve(z, &entries, &f.ret, &p).unwrap().value();
        assert_eq!(capped, all);
    }

    #[test]
    fn extract_ignores_bank_state() {
        let f = fixture(4, 2);
        let tape = Tape::new();
        let p = f.store.bind(&tape);
        let x = tokens(&tape, 12, 4, 0.0);
        let mut bank = RegisterBank::new(Some(3), &[2, 4]).unwrap();
        let (_, r1) = extract(x, &f.reg, &f.ext, &p).unwrap();
        bank.push(r1.to_array()).unwrap();
        bank.push(r1.to_array()).unwrap();
        let (_, r2) = extract(x, &f.reg, &f.ext, &p).unwrap();
        assert_eq!(r1.value(), r2.value());
    }
}
