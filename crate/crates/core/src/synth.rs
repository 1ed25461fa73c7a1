//! Synthetic Java-like classes: a package line, a few private fields and a
//! one-line getter and setter per field. Every interior line can be inferred
//! from the rest of its document, which is what an infilling model exploits.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::datapipe::Document;

const PACKAGES: &[&str] = &["billing", "catalog", "core", "inventory", "orders", "payments", "reports", "shipping", "users", "util"];
const NOUNS: &[&str] = &[
    "Account", "Address", "Batch", "Cart", "Customer", "Device", "Invoice", "Item", "Ledger", "Order", "Parcel", "Payment",
    "Product", "Profile", "Quote", "Receipt", "Route", "Session", "Ticket", "Vendor",
];
const ROLES: &[&str] = &["", "Entry", "Info", "Record", "Snapshot", "State", "Summary"];
const FIELDS: &[&str] = &[
    "amount", "balance", "city", "code", "count", "created", "discount", "email", "enabled", "expiry", "height", "label",
    "limit", "name", "owner", "price", "priority", "quantity", "rating", "region", "score", "status", "title", "total",
    "version", "weight",
];
const TYPES: &[&str] = &["int", "long", "double", "boolean", "String"];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_ascii_uppercase().to_string() + c.as_str()).unwrap_or_default()
}

/// One class with `2..=max_fields` fields.
pub fn java_class<R: Rng + ?Sized>(rng: &mut R, max_fields: usize) -> String {
    let pkg = PACKAGES.choose(rng).unwrap();
    let class = format!("{}{}", NOUNS.choose(rng).unwrap(), ROLES.choose(rng).unwrap());
    let n = rng.gen_range(2..=max_fields.max(2));
    let names: Vec<&str> = FIELDS.choose_multiple(rng, n).copied().collect();
    let types: Vec<&str> = (0..n).map(|_| *TYPES.choose(rng).unwrap()).collect();
    let mut s = format!("package com.acme.{pkg};\n\npublic class {class} {{\n");
    for (f, t) in names.iter().zip(&types) {
        s.push_str(&format!("    private {t} {f};\n"));
    }
    s.push('\n');
    for (f, t) in names.iter().zip(&types) {
        let cap = capitalize(f);
        let getter = if *t == "boolean" { "is" } else { "get" };
        s.push_str(&format!("    public {t} {getter}{cap}() {{ return {f}; }}\n"));
        s.push_str(&format!("    public void set{cap}({t} {f}) {{ this.{f} = {f}; }}\n"));
    }
    s.push_str("}\n");
    s
}

pub fn java_corpus(docs: usize, max_fields: usize, seed: u64) -> Vec<Document> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    (0..docs).map(|i| Document { id: format!("synth-{i}"), text: java_class(&mut rng, max_fields) }).collect()
}
