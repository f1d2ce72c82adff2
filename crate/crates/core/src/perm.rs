/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fill(n, &mut current, &mut used, &mut out);
    out
}

fn fill(n: usize, current: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
    if current.len() == n {
        out.push(current.clone());
        return;
    }
    for i in 0..n {
        if !used[i] {
            used[i] = true;
            current.push(i);
            fill(n, current, used, out);
            current.pop();
            used[i] = false;
        }
    }
}

/// All `c`-element subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, c: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if c > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..c).collect();
    loop {
        out.push(idx.clone());
        // Rightmost position that can still advance.
        let Some(i) = (0..c).rev().find(|&i| idx[i] != i + n - c) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..c {
            idx[j] = idx[j - 1] + 1;
        }
    }
}
