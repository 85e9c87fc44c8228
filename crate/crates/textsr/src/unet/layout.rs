//! Parameter layout of the guided U-Net, enumerated without allocating any
//! tensor storage.
//!
//! [`for_each_param`] walks the architecture exactly as the builder does and
//! reports every `(name, shape)` pair; [`parameter_count`] folds that walk
//! into a scalar. A unit test pins the walk to the real network by comparing
//! it against the variable store of a built model, so the two cannot drift
//! apart silently. Counting this way keeps ablation ledgers cheap: the
//! full-scale network would occupy hundreds of megabytes if materialized.

use super::GuidedUNetConfig;

/// Calls `f(name, shape)` once per learnable tensor, in build order.
pub fn for_each_param(cfg: &GuidedUNetConfig, f: &mut dyn FnMut(&str, &[usize])) {
    let widths = cfg.widths();
    let d_t = cfg.time_dim();
    let a = cfg.alphabet_size;
    let exp = super::FFN_EXPANSION;

    let linear = |p: &str, inp: usize, out: usize, f: &mut dyn FnMut(&str, &[usize])| {
        f(&format!("{p}.weight"), &[out, inp]);
        f(&format!("{p}.bias"), &[out]);
    };
    let conv = |p: &str, inp: usize, out: usize, k: usize, f: &mut dyn FnMut(&str, &[usize])| {
        f(&format!("{p}.weight"), &[out, inp, k, k]);
        f(&format!("{p}.bias"), &[out]);
    };
    let ln = |p: &str, c: usize, f: &mut dyn FnMut(&str, &[usize])| {
        f(&format!("{p}.weight"), &[c]);
        f(&format!("{p}.bias"), &[c]);
    };

    let res_block = |p: &str, c_in: usize, c_out: usize, f: &mut dyn FnMut(&str, &[usize])| {
        ln(&format!("{p}.ln1"), c_in, f);
        conv(&format!("{p}.conv1"), c_in, c_out, 3, f);
        linear(&format!("{p}.temb"), d_t, c_out, f);
        ln(&format!("{p}.ln2"), c_out, f);
        conv(&format!("{p}.conv2"), c_out, c_out, 3, f);
        if c_in != c_out {
            conv(&format!("{p}.skip"), c_in, c_out, 1, f);
        }
    };
    let msa = |p: &str, c: usize, f: &mut dyn FnMut(&str, &[usize])| {
        ln(&format!("{p}.ln"), c, f);
        for proj in ["q", "k", "v", "o"] {
            linear(&format!("{p}.{proj}"), c, c, f);
        }
    };
    let ffn = |p: &str, c: usize, f: &mut dyn FnMut(&str, &[usize])| {
        ln(&format!("{p}.ln"), c, f);
        linear(&format!("{p}.lin1"), c, c * exp, f);
        linear(&format!("{p}.lin2"), c * exp, c, f);
    };
    let mca = |p: &str, c: usize, f: &mut dyn FnMut(&str, &[usize])| {
        ln(&format!("{p}.ln"), c, f);
        linear(&format!("{p}.guide"), a, c, f);
        for proj in ["q", "k", "v", "o"] {
            linear(&format!("{p}.{proj}"), c, c, f);
        }
    };
    let rgrb = |p: &str,
                c_in: usize,
                c_out: usize,
                attend: bool,
                guided: bool,
                f: &mut dyn FnMut(&str, &[usize])| {
        res_block(&format!("{p}.res"), c_in, c_out, f);
        if attend {
            msa(&format!("{p}.msa"), c_out, f);
            ffn(&format!("{p}.msa_ffn"), c_out, f);
        }
        if guided {
            mca(&format!("{p}.mca"), c_out, f);
            ffn(&format!("{p}.mca_ffn"), c_out, f);
        }
    };

    linear("time_embed.lin1", d_t, d_t, f);
    linear("time_embed.lin2", d_t, d_t, f);

    let mut c_prev = cfg.latent_channels + cfg.cond_channels;
    for i in 1..=4 {
        let c = widths[i - 1];
        let attend = cfg.sa_block_ids.contains(&i);
        let guided = cfg.rg_block_ids.contains(&i);
        rgrb(&format!("enc{i}.rgrb1"), c_prev, c, attend, guided, f);
        rgrb(&format!("enc{i}.rgrb2"), c, c, attend, guided, f);
        conv(&format!("enc{i}.down"), c, c, 3, f);
        c_prev = c;
    }

    let c4 = widths[3];
    res_block("mid.res1", c4, c4, f);
    msa("mid.attn", c4, f);
    res_block("mid.res2", c4, c4, f);

    let mut prev_out = c4;
    for j in 1..=4 {
        let i = 5 - j;
        let c = widths[i - 1];
        let attend = cfg.sa_block_ids.contains(&i);
        let guided = cfg.rg_block_ids.contains(&i);
        let c_in = c + prev_out;
        rgrb(&format!("dec{j}.rgrb1"), c_in, c, attend, guided, f);
        rgrb(&format!("dec{j}.rgrb2"), c, c, attend, guided, f);
        conv(&format!("dec{j}.up"), c, c, 3, f);
        prev_out = c;
    }

    ln("head.ln", widths[0], f);
    conv("head.conv", widths[0], cfg.latent_channels, 3, f);
}

/// All `(name, shape)` pairs in build order.
pub fn layout(cfg: &GuidedUNetConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for_each_param(cfg, &mut |name, shape| {
        out.push((name.to_string(), shape.to_vec()));
    });
    out
}

/// Total learnable scalars for the configuration.
pub fn parameter_count(cfg: &GuidedUNetConfig) -> usize {
    let mut total = 0usize;
    for_each_param(cfg, &mut |_name, shape| {
        total += shape.iter().product::<usize>();
    });
    total
}
