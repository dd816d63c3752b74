//! Hand-checked examples for each fixture oracle.

mod common;

use mutamark::sandbox::{run_program, SandboxConfig};

fn oracle(problem: &str, args: &[&str], input: &str) -> String {
    oracle_at(&format!("{problem}/oracle/main"), args, input)
}

fn oracle_at(program: &str, args: &[&str], input: &str) -> String {
    let config = SandboxConfig::default();
    let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    let result = run_program(
        std::slice::from_ref(&config.interpreter),
        &common::corpus_dir().join(program),
        &args,
        input.as_bytes(),
        config.limits(),
    );
    assert!(result.succeeded(), "{program} {args:?}: {}", String::from_utf8_lossy(&result.stderr));
    String::from_utf8(result.stdout).unwrap()
}

#[test]
fn double_triple() {
    assert_eq!(oracle("double-triple", &["letter", "number"], "ab1\n"), "aabb111\n");
    assert_eq!(oracle("double-triple", &["letter", "letter"], "a\n"), "aa\n");
    assert_eq!(oracle("double-triple", &["question mark", "space"], "a ?\n"), "a   ??\n");
    assert_eq!(oracle("double-triple", &["vowel", "letter"], "ab\n"), "aabbb\n");
}

#[test]
fn binary_op_truth_tables() {
    let table = |op: &str| oracle("binary-op", &[op], "0011\n0101\n");
    assert_eq!(table("AND"), "0001\n");
    assert_eq!(table("OR"), "0111\n");
    assert_eq!(table("NOR"), "1000\n");
    assert_eq!(table("NAND"), "1110\n");
    assert_eq!(table("XNOR"), "1001\n");
    assert_eq!(table("XAND"), table("XNOR"));

    let (a, b) = ("110010111", "011011001");
    let xor: String = a.chars().zip(b.chars()).map(|(x, y)| if x == y { '0' } else { '1' }).collect();
    assert_eq!(oracle("binary-op", &["XOR"], &format!("{a}\n{b}\n")), format!("{xor}\n"));
}

#[test]
fn fizzbuzz() {
    assert_eq!(oracle("fizzbuzz", &["3", "5", "Fizz", "Buzz"], "5\n"), "1\n2\nFizz\n4\nBuzz\n");
    let out = oracle("fizzbuzz", &["3", "5", "Fizz", "Buzz"], "15\n");
    assert_eq!(out.lines().count(), 15);
    assert!(out.ends_with("14\nFizzBuzz\n"));
    let plain: String = (1..=22).map(|i| format!("{i}\n")).collect();
    assert_eq!(oracle("fizzbuzz", &["23", "29", "Foo", "Buzz"], "22\n"), plain);
    assert!(oracle("fizzbuzz", &["23", "29", "Foo", "Buzz"], "23\n").ends_with("22\nFoo\n"));
}

#[test]
fn string_hash() {
    assert_eq!(oracle("string-hash", &["MD5"], "\n"), "d41d8cd98f00b204e9800998ecf8427e\n");
    assert_eq!(oracle("string-hash", &["MD5"], "hello\n"), "5d41402abc4b2a76b9719d911017c592\n");
    let sha1 = oracle("string-hash", &["SHA1"], "hello\n");
    assert_eq!(sha1.trim_end().len(), 40);
    assert_eq!(sha1, "aaf4c61ddcc5e8a2dabede0f3b482cd9aea9434d\n");
    assert_eq!(oracle("string-hash", &["SHA512"], "\n").trim_end().len(), 128);
}

#[test]
fn set_aggregate() {
    assert_eq!(oracle("set-aggregate", &["sum"], "1 2 2 3\n"), "6\n");
    assert_eq!(oracle("set-aggregate", &["product"], "1 2 2 3\n"), "6\n");
    assert_eq!(oracle("set-aggregate", &["sum"], "4 4 -2 7 10\n"), "19\n");
    assert_eq!(oracle("set-aggregate", &["product"], "4 4 -2 7 10\n"), "-560\n");
    assert_eq!(oracle_at("set-aggregate/oracle/variants/product", &["product"], "2 3\n"), "6\n");
}

#[test]
fn average() {
    let table = "3\nNAME MARKS CLASS ID\nAnn 97 A 1\nBo 50 B 2\nCy 91 A 3\n";
    assert_eq!(oracle("average", &[], table), "79.33\n");
}
