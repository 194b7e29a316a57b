use serde::{Deserialize, Serialize};

use super::params::{init_tensor, Binder, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Var};

/// One transformer stage: a linear token embedding, a learned CLS token,
/// a learned positional table and `depth` pre-norm blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    /// Parameter name prefix, e.g. `stage1`.
    pub name: String,
    /// Rows of the positional table, CLS excluded.
    pub input_tokens: usize,
    /// Side of the square grid the positional rows are laid out on.
    pub pos_grid: usize,
    pub token_dim_in: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cls_token: bool,
}

impl ViTConfig {
    pub fn new(name: &str, grid: usize, token_dim_in: usize, embed_dim: usize) -> Self {
        ViTConfig {
            name: name.into(),
            input_tokens: grid * grid,
            pos_grid: grid,
            token_dim_in,
            embed_dim,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            cls_token: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{}: embed_dim {} must be a positive multiple of heads {}",
                self.name, self.embed_dim, self.heads
            )));
        }
        if self.pos_grid * self.pos_grid != self.input_tokens || !self.cls_token {
            return Err(Error::Config(format!("{}: positional grid and CLS token required", self.name)));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.token_dim_in == 0 {
            return Err(Error::Config(format!("{}: depth, mlp_ratio and token dim must be positive", self.name)));
        }
        Ok(())
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (n, d, h) = (&self.name, self.embed_dim, self.embed_dim * self.mlp_ratio);
        let mut out = vec![
            (format!("{n}.embed.weight"), vec![self.token_dim_in, d]),
            (format!("{n}.embed.bias"), vec![d]),
            (format!("{n}.cls"), vec![1, d]),
            (format!("{n}.pos"), vec![1 + self.input_tokens, d]),
        ];
        for b in 0..self.depth {
            let p = format!("{n}.blocks.{b}");
            out.extend([
                (format!("{p}.norm1.gamma"), vec![d]),
                (format!("{p}.norm1.beta"), vec![d]),
                (format!("{p}.qkv.weight"), vec![d, 3 * d]),
                (format!("{p}.proj.weight"), vec![d, d]),
                (format!("{p}.proj.bias"), vec![d]),
                (format!("{p}.norm2.gamma"), vec![d]),
                (format!("{p}.norm2.beta"), vec![d]),
                (format!("{p}.fc1.weight"), vec![d, h]),
                (format!("{p}.fc1.bias"), vec![h]),
                (format!("{p}.fc2.weight"), vec![h, d]),
                (format!("{p}.fc2.bias"), vec![d]),
            ]);
        }
        out.push((format!("{n}.norm.gamma"), vec![d]));
        out.push((format!("{n}.norm.beta"), vec![d]));
        out
    }

    pub fn init<T: Element>(&self, seed: u64, std: f64, store: &mut ParamStore<T>) {
        for (name, shape) in self.param_shapes() {
            let t = init_tensor(seed, &name, &shape, std);
            store.insert(name, t);
        }
    }

    /// Positional rows of an `n×n` token grid centred in the table grid.
    pub fn crop_positions(&self, n: usize) -> Result<Vec<usize>> {
        crop_positions(self.pos_grid, n)
    }
}

/// Row-major indices of the centred `n×n` window of a `table×table` grid,
/// offset `(table − n) / 2` on both axes.
pub fn crop_positions(table: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > table {
        return Err(Error::InvalidShape(format!("cannot crop {n}x{n} from a {table}x{table} grid")));
    }
    let off = (table - n) / 2;
    Ok((0..n * n).map(|i| (off + i / n) * table + off + i % n).collect())
}

fn linear<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, x: Var, name: &str, bias: bool) -> Result<Var> {
    let w = p.var(g, &format!("{name}.weight"))?;
    let y = g.matmul(x, w)?;
    if bias {
        let b = p.var(g, &format!("{name}.bias"))?;
        g.add(y, b)
    } else {
        Ok(y)
    }
}

fn norm<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, x: Var, name: &str) -> Result<Var> {
    let gamma = p.var(g, &format!("{name}.gamma"))?;
    let beta = p.var(g, &format!("{name}.beta"))?;
    let y = g.layer_norm(x)?;
    let y = g.mul(y, gamma)?;
    g.add(y, beta)
}

/// `[B, T, d]` → `[B·H, T, d/H]`, taking the `which`-th third of `qkv`.
fn split_heads<T: Element>(g: &mut Graph<T>, qkv: Var, which: usize, b: usize, t: usize, d: usize, heads: usize) -> Result<Var> {
    let part = g.slice(qkv, 2, which * d, d)?;
    let part = g.reshape(part, &[b, t, heads, d / heads])?;
    let part = g.permute(part, &[0, 2, 1, 3])?;
    g.reshape(part, &[b * heads, t, d / heads])
}

fn attention<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, cfg: &ViTConfig, x: Var, prefix: &str) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let heads = cfg.heads;
    let qkv = linear(g, p, x, &format!("{prefix}.qkv"), false)?;
    let q = split_heads(g, qkv, 0, b, t, d, heads)?;
    let k = split_heads(g, qkv, 1, b, t, d, heads)?;
    let v = split_heads(g, qkv, 2, b, t, d, heads)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / ((d / heads) as f64).sqrt())?;
    let att = g.softmax(scores)?;
    let out = g.matmul(att, v)?;
    let out = g.reshape(out, &[b, heads, t, d / heads])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[b, t, d])?;
    linear(g, p, out, &format!("{prefix}.proj"), true)
}

fn block<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, cfg: &ViTConfig, x: Var, i: usize) -> Result<Var> {
    let prefix = format!("{}.blocks.{i}", cfg.name);
    let h = norm(g, p, x, &format!("{prefix}.norm1"))?;
    let a = attention(g, p, cfg, h, &prefix)?;
    let x = g.add(x, a)?;
    let h = norm(g, p, x, &format!("{prefix}.norm2"))?;
    let h = linear(g, p, h, &format!("{prefix}.fc1"), true)?;
    let h = g.gelu(h)?;
    let h = linear(g, p, h, &format!("{prefix}.fc2"), true)?;
    g.add(x, h)
}

/// Embeds `[B, n, token_dim_in]` tokens sitting at the given positional rows
/// and returns the final normalised CLS state, `[B, embed_dim]`.
pub fn vit_forward<T: Element>(g: &mut Graph<T>, p: &mut Binder<T>, cfg: &ViTConfig, tokens: Var, positions: &[usize]) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 3 || shape[2] != cfg.token_dim_in || shape[1] != positions.len() {
        return Err(Error::shape(
            "vit_forward",
            &shape,
            &[shape.first().copied().unwrap_or(0), positions.len(), cfg.token_dim_in],
        ));
    }
    if let Some(&bad) = positions.iter().find(|&&q| q >= cfg.input_tokens) {
        return Err(Error::InvalidShape(format!(
            "{}: position {bad} outside a table of {}",
            cfg.name, cfg.input_tokens
        )));
    }
    let (b, d) = (shape[0], cfg.embed_dim);
    let x = linear(g, p, tokens, &format!("{}.embed", cfg.name), true)?;
    let cls = p.var(g, &format!("{}.cls", cfg.name))?;
    let cls = g.broadcast_leading(cls, b)?;
    let x = g.concat(&[cls, x], 1)?;
    let table = p.var(g, &format!("{}.pos", cfg.name))?;
    let rows: Vec<usize> = std::iter::once(0).chain(positions.iter().map(|&q| q + 1)).collect();
    let pos = g.index_select(table, &rows)?;
    let mut x = g.add(x, pos)?;
    for i in 0..cfg.depth {
        x = block(g, p, cfg, x, i)?;
    }
    let x = norm(g, p, x, &format!("{}.norm", cfg.name))?;
    let cls = g.slice(x, 1, 0, 1)?;
    g.reshape(cls, &[b, d])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_rule() {
        assert_eq!(crop_positions(4, 4).unwrap(), (0..16).collect::<Vec<_>>());
        assert_eq!(crop_positions(4, 1).unwrap(), vec![5]);
        assert_eq!(crop_positions(4, 2).unwrap(), vec![5, 6, 9, 10]);
        let small = crop_positions(16, 4).unwrap();
        assert_eq!(small[0], 6 * 16 + 6);
        assert_eq!(small[15], 9 * 16 + 9);
        assert!(crop_positions(4, 5).is_err());
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut c = ViTConfig::new("s", 4, 48, 30);
        assert!(c.validate().is_err());
        c.embed_dim = 32;
        assert!(c.validate().is_ok());
    }
}
